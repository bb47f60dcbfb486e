#include "bits/evalsuite.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <numeric>

namespace bits {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

constexpr char kCodeMagic[8] = {'B', 'I', 'T', 'S', 'C', 'O', 'D', 'E'};

void wraw(std::FILE* f, const void* p, size_t n, const std::string& path) {
    if (std::fwrite(p, 1, n, f) != n) raise(ErrCode::data, "write failed: " + path);
}
void rraw(std::FILE* f, void* p, size_t n, const std::string& path) {
    if (std::fread(p, 1, n, f) != n)
        raise(ErrCode::data, "truncated code file: " + path, int(DataErr::truncated));
}

}  // namespace

void FeatureSet::validate() const {
    if (int64_t(features.size()) != int64_t(n) * dim)
        raise(ErrCode::invalid, "feature buffer inconsistent with n*dim");
    for (float v : features)
        if (!std::isfinite(v)) raise(ErrCode::numeric, "NaN in features");
    if (!labels.empty() && int(labels.size()) != n)
        raise(ErrCode::invalid, "label count inconsistent with n");
    if (factor_dim > 0 && int64_t(factors.size()) != int64_t(n) * factor_dim)
        raise(ErrCode::invalid, "factor buffer inconsistent with n*factor_dim");
}

void BinaryCodeSet::validate() const {
    if (bits < 8 || bits % 8 != 0)
        raise(ErrCode::invalid, "code bits must be a positive multiple of 8");
    if (int64_t(packed.size()) != int64_t(n) * (bits / 8))
        raise(ErrCode::invalid, "packed buffer inconsistent with n*B/8");
}

void write_codes(const BinaryCodeSet& codes, const std::vector<uint16_t>& labels,
                 const std::string& path) {
    codes.validate();
    if (!labels.empty() && int(labels.size()) != codes.n)
        raise(ErrCode::invalid, "label count inconsistent with code count");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) raise(ErrCode::data, "cannot open for write: " + path);
    wraw(f.get(), kCodeMagic, 8, path);
    const uint32_t version = 1, n = uint32_t(codes.n), b = uint32_t(codes.bits);
    wraw(f.get(), &version, 4, path);
    wraw(f.get(), &n, 4, path);
    wraw(f.get(), &b, 4, path);
    wraw(f.get(), codes.packed.data(), codes.packed.size(), path);
    const uint8_t flag = labels.empty() ? 0 : 1;
    wraw(f.get(), &flag, 1, path);
    if (flag) wraw(f.get(), labels.data(), labels.size() * sizeof(uint16_t), path);
}

std::pair<BinaryCodeSet, std::vector<uint16_t>> read_codes(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) raise(ErrCode::data, "cannot open code file: " + path);
    char magic[8];
    rraw(f.get(), magic, 8, path);
    if (std::memcmp(magic, kCodeMagic, 8) != 0)
        raise(ErrCode::data, "magic mismatch (not a BITSCODE file): " + path,
              int(DataErr::bad_magic));
    uint32_t version = 0, n = 0, b = 0;
    rraw(f.get(), &version, 4, path);
    if (version != 1) raise(ErrCode::data, "unsupported code file version");
    rraw(f.get(), &n, 4, path);
    rraw(f.get(), &b, 4, path);
    BinaryCodeSet codes;
    codes.n = int(n);
    codes.bits = int(b);
    if (b < 8 || b % 8 != 0)
        raise(ErrCode::data, "bad bit count in code file", int(DataErr::inconsistent));
    codes.packed.resize(size_t(n) * (b / 8));
    rraw(f.get(), codes.packed.data(), codes.packed.size(), path);
    uint8_t flag = 0;
    rraw(f.get(), &flag, 1, path);
    std::vector<uint16_t> labels;
    if (flag) {
        labels.resize(n);
        rraw(f.get(), labels.data(), labels.size() * sizeof(uint16_t), path);
    }
    if (std::fgetc(f.get()) != EOF)
        raise(ErrCode::data, "trailing bytes in code file: " + path, int(DataErr::inconsistent));
    return {std::move(codes), std::move(labels)};
}

// ---------------------------------------------------------------------------
// extraction
// ---------------------------------------------------------------------------

namespace {

// teacher/student forward without gradient state
std::pair<Tensor<float>, Tensor<float>> eval_forward(ModelPair<float>& pair, Branch branch,
                                                     const Tensor<float>& batch) {
    Tape<float> tape;
    BoundBranch<float> bb = bind_branch(tape, pair.branch(branch), false);
    ForwardOut<float> out = forward_branch(tape, pair.cfg, bb, tape.constant(batch));
    return {out.features.val(), out.logits.val()};
}

Tensor<float> eval_batch(const ImageDataset& data, const std::vector<int64_t>& ids, int64_t b0,
                         int64_t cnt, int h, int w, const ChannelStats& stats) {
    Tensor<float> first = center_view(data, ids[size_t(b0)], h, w);
    normalize_view(first, stats);
    Tensor<float> out(Shape{int(cnt), h, w, first.dim(2)});
    std::copy(first.data(), first.data() + first.size(), out.data());
    parallel_for(cnt - 1, [&](int64_t i) {
        Tensor<float> v = center_view(data, ids[size_t(b0 + 1 + i)], h, w);
        normalize_view(v, stats);
        std::copy(v.data(), v.data() + v.size(), out.data() + (i + 1) * v.size());
    });
    return out;
}

}  // namespace

Extraction extract(const Checkpoint& ckpt, const ImageDataset& data, ExtractWhat what,
                   Branch branch) {
    data.validate();
    const ModelConfig mcfg = model_config_from_meta(ckpt.meta);
    if (int(data.channels) != mcfg.in_c)
        raise(ErrCode::data, "dataset channels do not match checkpoint model");
    const ChannelStats stats = channel_stats_from_meta(ckpt.meta);
    ModelPair<float> pair = init_model<float>(mcfg);
    restore_pair(pair, ckpt);

    Extraction ex;
    ex.labels = data.labels;
    const int64_t n = data.n;
    std::vector<int64_t> ids(static_cast<size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);

    if (what == ExtractWhat::features) {
        ex.features.n = int(n);
        ex.features.dim = mcfg.backbone_dim;
        ex.features.features.resize(size_t(n) * mcfg.backbone_dim);
        ex.features.labels = data.labels;
        ex.features.factor_dim = data.factor_dim;
        ex.features.factors = data.factors;
    } else {
        ex.codes.n = int(n);
        ex.codes.bits = mcfg.head_out;
        ex.codes.packed.assign(size_t(n) * (mcfg.head_out / 8), 0);
    }

    const int64_t bs = 256;
    for (int64_t b0 = 0; b0 < n; b0 += bs) {
        const int64_t cnt = std::min(bs, n - b0);
        Tensor<float> batch = eval_batch(data, ids, b0, cnt, mcfg.in_h, mcfg.in_w, stats);
        auto [h, logits] = eval_forward(pair, branch, batch);
        if (what == ExtractWhat::features) {
            std::copy(h.data(), h.data() + h.size(),
                      ex.features.features.data() + b0 * mcfg.backbone_dim);
        } else {
            const Tensor<uint8_t> bits = binarize_targets(logits);
            for (int64_t i = 0; i < cnt; ++i)
                for (int b = 0; b < mcfg.head_out; ++b)
                    ex.codes.set(int(b0 + i), b, bits[i * mcfg.head_out + b] != 0);
        }
    }
    if (what == ExtractWhat::features) ex.features.validate();
    else ex.codes.validate();
    return ex;
}

double crossview_bit_agreement(const Checkpoint& ckpt, const ImageDataset& data,
                               const AugmentPolicy& policy, uint64_t seed, int batch_size) {
    data.validate();
    policy.validate();
    const ModelConfig mcfg = model_config_from_meta(ckpt.meta);
    const ChannelStats stats = channel_stats_from_meta(ckpt.meta);
    ModelPair<float> pair = init_model<float>(mcfg);
    restore_pair(pair, ckpt);

    const int local_h = mcfg.backbone == BackboneKind::mlp ? mcfg.in_h : std::max(4, mcfg.in_h / 2);
    const int local_w = mcfg.backbone == BackboneKind::mlp ? mcfg.in_w : std::max(4, mcfg.in_w / 2);
    const auto pairing = view_pairing(policy.n_global, policy.n_local);

    int64_t match = 0, count = 0;
    for (int64_t b0 = 0; b0 < int64_t(data.n); b0 += batch_size) {
        const int64_t cnt = std::min<int64_t>(batch_size, data.n - b0);
        std::vector<ViewSet> sets(static_cast<size_t>(cnt));
        parallel_for(cnt, [&](int64_t i) {
            Rng rng(derive_seed(seed, 0xE7A1u, uint64_t(b0 + i)));
            sets[size_t(i)] = make_views(data, b0 + i, policy, mcfg.in_h, mcfg.in_w, local_h,
                                         local_w, rng);
            for (auto& v : sets[size_t(i)].globals) normalize_view(v, stats);
            for (auto& v : sets[size_t(i)].locals) normalize_view(v, stats);
        });
        std::vector<Tensor<uint8_t>> teacher_bits;
        for (int g = 0; g < policy.n_global; ++g)
            teacher_bits.push_back(binarize_targets(
                eval_forward(pair, Branch::teacher, stack_views(sets, true, g)).second));
        std::vector<Tensor<uint8_t>> student_bits;
        for (int g = 0; g < policy.n_global; ++g)
            student_bits.push_back(binarize_targets(
                eval_forward(pair, Branch::student, stack_views(sets, true, g)).second));
        for (int l = 0; l < policy.n_local; ++l)
            student_bits.push_back(binarize_targets(
                eval_forward(pair, Branch::student, stack_views(sets, false, l)).second));
        for (const auto& [v, g] : pairing) {
            const Tensor<uint8_t>& sv = student_bits[size_t(v)];
            const Tensor<uint8_t>& tv = teacher_bits[size_t(g)];
            for (int64_t i = 0; i < sv.size(); ++i) {
                match += sv[i] == tv[i];
                ++count;
            }
        }
    }
    return count ? double(match) / double(count) : 0.0;
}

// ---------------------------------------------------------------------------
// kNN / probe / retrieval
// ---------------------------------------------------------------------------

namespace {

std::vector<double> l2_normalized(const FeatureSet& fs) {
    std::vector<double> out(size_t(fs.n) * fs.dim);
    for (int i = 0; i < fs.n; ++i) {
        const float* r = fs.row(i);
        double nrm = 0.0;
        for (int j = 0; j < fs.dim; ++j) nrm += double(r[j]) * r[j];
        nrm = std::sqrt(nrm) + 1e-12;
        for (int j = 0; j < fs.dim; ++j) out[size_t(i) * fs.dim + j] = double(r[j]) / nrm;
    }
    return out;
}

}  // namespace

double knn_classify(const FeatureSet& train, const FeatureSet& test, int k, double temp) {
    train.validate();
    test.validate();
    if (train.n == 0) raise(ErrCode::invalid, "knn_classify: empty train set");
    if (train.labels.empty() || test.labels.empty())
        raise(ErrCode::invalid, "knn_classify: labels required");
    if (k > train.n) raise(ErrCode::invalid, "knn_classify: k exceeds train size");
    if (train.dim != test.dim) raise(ErrCode::invalid, "knn_classify: dimension mismatch");

    const std::vector<double> tr = l2_normalized(train);
    const std::vector<double> te = l2_normalized(test);
    std::vector<int> correct(static_cast<size_t>(test.n), 0);
    parallel_for(test.n, [&](int64_t q) {
        std::vector<std::pair<double, int>> sims(static_cast<size_t>(train.n));
        for (int i = 0; i < train.n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < train.dim; ++j)
                dot += tr[size_t(i) * train.dim + j] * te[size_t(q) * train.dim + j];
            sims[size_t(i)] = {dot, i};
        }
        std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return a.second < b.second;
                          });
        std::vector<double> votes;
        for (int i = 0; i < k; ++i) {
            const uint16_t cls = train.labels[size_t(sims[size_t(i)].second)];
            if (votes.size() <= cls) votes.resize(size_t(cls) + 1, 0.0);
            votes[cls] += std::exp(sims[size_t(i)].first / temp);
        }
        int best = 0;
        for (size_t c = 1; c < votes.size(); ++c)
            if (votes[c] > votes[size_t(best)]) best = int(c);  // ties keep the smaller id
        correct[size_t(q)] = best == int(test.labels[size_t(q)]);
    });
    int64_t ok = 0;
    for (int v : correct) ok += v;
    return double(ok) / double(test.n);
}

double linear_probe(const FeatureSet& train, const FeatureSet& test, int epochs, double lr) {
    train.validate();
    test.validate();
    if (train.labels.empty() || test.labels.empty())
        raise(ErrCode::invalid, "linear_probe: labels required");
    int classes = 0;
    for (uint16_t l : train.labels) classes = std::max(classes, int(l) + 1);
    for (uint16_t l : test.labels) classes = std::max(classes, int(l) + 1);
    const int d = train.dim, n = train.n;

    std::vector<double> w(size_t(d) * classes, 0.0), b(static_cast<size_t>(classes), 0.0);
    std::vector<double> logits(size_t(n) * classes);
    std::vector<double> gw(w.size()), gb(b.size());
    for (int e = 0; e < epochs; ++e) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const float* x = train.row(i);
            double* lo = logits.data() + size_t(i) * classes;
            for (int c = 0; c < classes; ++c) {
                double acc = b[size_t(c)];
                for (int j = 0; j < d; ++j) acc += double(x[j]) * w[size_t(j) * classes + c];
                lo[c] = acc;
            }
            const double mx = *std::max_element(lo, lo + classes);
            double z = 0.0;
            for (int c = 0; c < classes; ++c) z += std::exp(lo[c] - mx);
            if (!std::isfinite(z)) raise(ErrCode::numeric, "linear_probe: diverged");
            for (int c = 0; c < classes; ++c) {
                const double p = std::exp(lo[c] - mx) / z;
                const double g = (p - (train.labels[size_t(i)] == c ? 1.0 : 0.0)) / double(n);
                gb[size_t(c)] += g;
                for (int j = 0; j < d; ++j) gw[size_t(j) * classes + c] += g * double(x[j]);
            }
        }
        for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
        for (size_t i = 0; i < b.size(); ++i) b[i] -= lr * gb[i];
    }

    int64_t ok = 0;
    for (int i = 0; i < test.n; ++i) {
        const float* x = test.row(i);
        int best = 0;
        double bestv = -1e300;
        for (int c = 0; c < classes; ++c) {
            double acc = b[size_t(c)];
            for (int j = 0; j < d; ++j) acc += double(x[j]) * w[size_t(j) * classes + c];
            if (acc > bestv) {  // ties keep the smaller class id
                bestv = acc;
                best = c;
            }
        }
        ok += best == int(test.labels[size_t(i)]);
    }
    return double(ok) / double(test.n);
}

namespace {

double map_from_orders(const std::vector<std::vector<int>>& order,
                       const std::vector<uint16_t>& labels) {
    double ap_sum = 0.0;
    int64_t counted = 0;
    for (size_t q = 0; q < order.size(); ++q) {
        int relevant = 0;
        for (size_t i = 0; i < labels.size(); ++i)
            if (i != q && labels[i] == labels[q]) ++relevant;
        if (relevant == 0) continue;
        int hits = 0;
        double ap = 0.0;
        for (size_t r = 0; r < order[q].size(); ++r) {
            if (labels[size_t(order[q][r])] == labels[q]) {
                ++hits;
                ap += double(hits) / double(r + 1);
            }
        }
        ap_sum += ap / double(relevant);
        ++counted;
    }
    if (counted == 0)
        raise(ErrCode::invalid, "retrieval_map: no query has a relevant item (undefined mAP)");
    return ap_sum / double(counted);
}

}  // namespace

int hamming_distance(const uint8_t* a, const uint8_t* b, int nbytes) {
    int dist = 0;
    int i = 0;
    for (; i + 8 <= nbytes; i += 8) {
        uint64_t x, y;
        std::memcpy(&x, a + i, 8);
        std::memcpy(&y, b + i, 8);
        dist += std::popcount(x ^ y);
    }
    for (; i < nbytes; ++i) dist += std::popcount(unsigned(a[i] ^ b[i]));
    return dist;
}

double retrieval_map(const FeatureSet& db) {
    db.validate();
    if (db.labels.empty()) raise(ErrCode::invalid, "retrieval_map: labels required");
    if (db.n < 2) raise(ErrCode::invalid, "retrieval_map: need at least 2 samples");
    const std::vector<double> x = l2_normalized(db);
    std::vector<std::vector<int>> order(static_cast<size_t>(db.n));
    parallel_for(db.n, [&](int64_t q) {
        std::vector<std::pair<double, int>> sims;
        sims.reserve(size_t(db.n) - 1);
        for (int i = 0; i < db.n; ++i) {
            if (i == int(q)) continue;
            double dot = 0.0;
            for (int j = 0; j < db.dim; ++j)
                dot += x[size_t(i) * db.dim + j] * x[size_t(q) * db.dim + j];
            sims.push_back({dot, i});
        }
        std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        order[size_t(q)].reserve(sims.size());
        for (const auto& [s, i] : sims) order[size_t(q)].push_back(i);
    });
    return map_from_orders(order, db.labels);
}

double retrieval_map(const BinaryCodeSet& codes, const std::vector<uint16_t>& labels) {
    codes.validate();
    if (int(labels.size()) != codes.n) raise(ErrCode::invalid, "retrieval_map: labels required");
    if (codes.n < 2) raise(ErrCode::invalid, "retrieval_map: need at least 2 samples");
    const int nb = codes.bytes_per_sample();
    std::vector<std::vector<int>> order(static_cast<size_t>(codes.n));
    parallel_for(codes.n, [&](int64_t q) {
        std::vector<std::pair<int, int>> dists;
        dists.reserve(size_t(codes.n) - 1);
        for (int i = 0; i < codes.n; ++i) {
            if (i == int(q)) continue;
            dists.push_back({hamming_distance(codes.row(int(q)), codes.row(i), nb), i});
        }
        std::sort(dists.begin(), dists.end());  // ascending distance, then ascending index
        order[size_t(q)].reserve(dists.size());
        for (const auto& [d2, i] : dists) order[size_t(q)].push_back(i);
    });
    return map_from_orders(order, labels);
}

BinaryCodeSet subsample_bits(const BinaryCodeSet& codes, int m, uint64_t seed) {
    codes.validate();
    if (m < 8 || m % 8 != 0 || m > codes.bits)
        raise(ErrCode::invalid, "subsample_bits: m must be a multiple of 8 in [8, B]");
    std::vector<int> all(static_cast<size_t>(codes.bits));
    std::iota(all.begin(), all.end(), 0);
    Rng rng(seed);
    for (int i = 0; i < m; ++i) {
        const int j = i + int(rng.uniform_int(codes.bits - i));
        std::swap(all[size_t(i)], all[size_t(j)]);
    }
    std::vector<int> pick(all.begin(), all.begin() + m);
    std::sort(pick.begin(), pick.end());

    BinaryCodeSet out;
    out.n = codes.n;
    out.bits = m;
    out.packed.assign(size_t(codes.n) * (m / 8), 0);
    for (int i = 0; i < codes.n; ++i)
        for (int b = 0; b < m; ++b)
            if (codes.get(i, pick[size_t(b)])) out.set(i, b, true);
    return out;
}

EntropyReport code_entropy(const BinaryCodeSet& codes, int block_size) {
    codes.validate();
    if (codes.n < 1) raise(ErrCode::invalid, "code_entropy: need at least one sample");
    if (block_size < 1 || block_size > 16)
        raise(ErrCode::invalid, "code_entropy: block_size must lie in [1,16]");
    if (codes.bits % block_size != 0)
        raise(ErrCode::invalid, "code_entropy: block_size must divide B");

    EntropyReport rep;
    rep.block_size = block_size;
    rep.marginal.resize(static_cast<size_t>(codes.bits));
    for (int b = 0; b < codes.bits; ++b) {
        int64_t ones = 0;
        for (int i = 0; i < codes.n; ++i) ones += codes.get(i, b);
        const double p = double(ones) / double(codes.n);
        double h = 0.0;
        if (p > 0.0 && p < 1.0) h = -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
        rep.marginal[size_t(b)] = h;
        rep.marginal_mean += h;
    }
    rep.marginal_mean /= double(codes.bits);

    const int nblocks = codes.bits / block_size;
    rep.block.resize(static_cast<size_t>(nblocks));
    std::vector<int64_t> counts(size_t(1) << block_size);
    for (int blk = 0; blk < nblocks; ++blk) {
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < codes.n; ++i) {
            uint32_t v = 0;
            for (int b = 0; b < block_size; ++b)
                v |= uint32_t(codes.get(i, blk * block_size + b)) << b;
            ++counts[v];
        }
        double h = 0.0;
        for (int64_t c : counts) {
            if (c == 0) continue;
            const double p = double(c) / double(codes.n);
            h -= p * std::log2(p);
        }
        rep.block[size_t(blk)] = h;
        rep.block_mean += h;
    }
    rep.block_mean /= double(nblocks);
    return rep;
}

std::vector<BitConditionClass> bit_condition_report(const BinaryCodeSet& codes,
                                                    const std::vector<uint16_t>& labels,
                                                    int bit_index) {
    codes.validate();
    if (int(labels.size()) != codes.n)
        raise(ErrCode::invalid, "bit_condition_report: labels required");
    if (bit_index < 0 || bit_index >= codes.bits)
        raise(ErrCode::invalid, "bit_condition_report: bit index out of range");
    uint16_t max_label = 0;
    for (uint16_t l : labels) max_label = std::max(max_label, l);
    std::vector<BitConditionClass> rep(size_t(max_label) + 1);
    for (size_t c = 0; c < rep.size(); ++c) rep[c].label = uint16_t(c);
    for (int i = 0; i < codes.n; ++i) {
        BitConditionClass& cls = rep[labels[size_t(i)]];
        if (codes.get(i, bit_index))
            cls.ids_bit1.push_back(i);
        else
            cls.ids_bit0.push_back(i);
    }
    for (auto& cls : rep) {
        const size_t total = cls.ids_bit0.size() + cls.ids_bit1.size();
        cls.activation_rate = total ? double(cls.ids_bit1.size()) / double(total) : 0.0;
    }
    return rep;
}

nlohmann::json bit_condition_json(const std::vector<BitConditionClass>& report, int bit_index) {
    nlohmann::json j;
    j["bit"] = bit_index;
    j["classes"] = nlohmann::json::array();
    for (const auto& cls : report) {
        j["classes"].push_back({{"label", cls.label},
                                {"ids_bit0", cls.ids_bit0},
                                {"ids_bit1", cls.ids_bit1},
                                {"activation_rate", cls.activation_rate}});
    }
    return j;
}

std::vector<double> factor_bit_mutual_information(const BinaryCodeSet& codes,
                                                  const std::vector<uint16_t>& factors,
                                                  int factor_dim) {
    codes.validate();
    if (factor_dim < 1 || int64_t(factors.size()) != int64_t(codes.n) * factor_dim)
        raise(ErrCode::invalid, "factor_bit_mutual_information: factors required");
    std::vector<double> mi(size_t(codes.bits) * factor_dim, 0.0);
    const double n = double(codes.n);
    for (int f = 0; f < factor_dim; ++f) {
        int vmax = 0;
        for (int i = 0; i < codes.n; ++i)
            vmax = std::max(vmax, int(factors[size_t(i) * factor_dim + f]));
        const int nv = vmax + 1;
        std::vector<int64_t> joint(size_t(2) * nv);
        for (int b = 0; b < codes.bits; ++b) {
            std::fill(joint.begin(), joint.end(), 0);
            for (int i = 0; i < codes.n; ++i) {
                const int z = codes.get(i, b) ? 1 : 0;
                ++joint[size_t(z) * nv + factors[size_t(i) * factor_dim + f]];
            }
            std::vector<int64_t> pz(2, 0);
            std::vector<int64_t> pv(static_cast<size_t>(nv), 0);
            for (int z = 0; z < 2; ++z)
                for (int v = 0; v < nv; ++v) {
                    pz[size_t(z)] += joint[size_t(z) * nv + v];
                    pv[size_t(v)] += joint[size_t(z) * nv + v];
                }
            double acc = 0.0;
            for (int z = 0; z < 2; ++z)
                for (int v = 0; v < nv; ++v) {
                    const int64_t c = joint[size_t(z) * nv + v];
                    if (c == 0) continue;
                    const double pj = double(c) / n;
                    acc += pj * std::log2(pj / ((double(pz[size_t(z)]) / n) *
                                                (double(pv[size_t(v)]) / n)));
                }
            mi[size_t(b) * factor_dim + f] = acc;
        }
    }
    return mi;
}

}  // namespace bits
