#include "bits/capi.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "bits/evalsuite.hpp"
#include "bits/runconfig.hpp"
#include "bits/spectral.hpp"
#include "bits/verify.hpp"

using namespace bits;

struct bits_config {
    RunConfig cfg;
};

struct bits_dataset {
    ImageDataset ds;
};

namespace {

thread_local std::string g_error;
thread_local int g_error_detail = 0;

bits_status to_status(ErrCode c) {
    switch (c) {
        case ErrCode::fail: return BITS_ERR_FAIL;
        case ErrCode::config: return BITS_ERR_CONFIG;
        case ErrCode::data: return BITS_ERR_DATA;
        case ErrCode::numeric: return BITS_ERR_NUMERIC;
        case ErrCode::invalid: return BITS_ERR_INVALID;
    }
    return BITS_ERR_FAIL;
}

template <class F>
bits_status guarded(F&& f) {
    try {
        g_error.clear();
        g_error_detail = 0;
        return f();
    } catch (const BitsError& e) {
        g_error = e.what();
        g_error_detail = e.detail();
        return to_status(e.code());
    } catch (const std::exception& e) {
        g_error = e.what();
        return BITS_ERR_FAIL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

// BITS_THREADS overrides the workers key everywhere.
void apply_threads(RunConfig& cfg) {
    if (const char* env = std::getenv("BITS_THREADS"); env && *env) cfg.set("workers", env);
    const int w = int(cfg.integer("workers"));
    set_max_threads(w <= 0 ? 1 : w);
}

ImageDataset open_dataset_checked(const std::string& path) {
    if (path.empty()) raise(ErrCode::data, "no dataset path given");
    if (!std::filesystem::exists(path)) raise(ErrCode::data, "dataset not found: " + path);
    return read_dataset(path);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) raise(ErrCode::data, "cannot write " + path);
    f << text;
}

// evaluation split: seeded permutation, first round(n*split) rows train
std::pair<FeatureSet, FeatureSet> split_features(const FeatureSet& fs, double split,
                                                 uint64_t seed) {
    if (fs.labels.empty()) raise(ErrCode::data, "labels required for this evaluation");
    if (!(split > 0.0 && split < 1.0)) raise(ErrCode::config, "split must lie in (0,1)");
    std::vector<int> order(static_cast<size_t>(fs.n));
    for (int i = 0; i < fs.n; ++i) order[size_t(i)] = i;
    Rng rng(derive_seed(seed, 0x53504c54u));
    for (int i = fs.n - 1; i > 0; --i) {
        const int j = int(rng.uniform_int(i + 1));
        std::swap(order[size_t(i)], order[size_t(j)]);
    }
    const int ntrain = int(std::lround(split * fs.n));
    if (ntrain < 1 || ntrain >= fs.n) raise(ErrCode::config, "split leaves an empty side");
    auto take = [&](int from, int to) {
        FeatureSet out;
        out.n = to - from;
        out.dim = fs.dim;
        out.features.resize(size_t(out.n) * fs.dim);
        out.labels.resize(static_cast<size_t>(out.n));
        for (int i = from; i < to; ++i) {
            const int src = order[size_t(i)];
            std::copy(fs.row(src), fs.row(src) + fs.dim,
                      out.features.data() + int64_t(i - from) * fs.dim);
            out.labels[size_t(i - from)] = fs.labels[size_t(src)];
        }
        return out;
    };
    return {take(0, ntrain), take(ntrain, fs.n)};
}

nlohmann::json options_echo(const RunConfig& cfg) {
    nlohmann::json j;
    for (const auto& [key, spec] : RunConfig::registry()) j[key] = cfg.get(key);
    return j;
}

}  // namespace

extern "C" {

const char* bits_version(void) { return "0.1.0"; }

const char* bits_last_error(void) { return g_error.c_str(); }
int bits_last_error_detail(void) { return g_error_detail; }

void bits_set_threads(int n) { set_max_threads(n <= 0 ? 1 : n); }

void bits_string_free(char* s) { std::free(s); }

bits_status bits_config_create(bits_config** out) {
    return guarded([&]() {
        *out = new bits_config{};
        return BITS_OK;
    });
}

bits_status bits_config_load(const char* path, bits_config** out) {
    return guarded([&]() {
        if (!path) raise(ErrCode::config, "null config path");
        *out = new bits_config{RunConfig::from_file(path)};
        return BITS_OK;
    });
}

bits_status bits_config_set(bits_config* cfg, const char* key, const char* value) {
    return guarded([&]() {
        if (!cfg || !key || !value) raise(ErrCode::invalid, "null argument");
        cfg->cfg.set(key, value);
        return BITS_OK;
    });
}

bits_status bits_config_get(const bits_config* cfg, const char* key, char** value_out) {
    return guarded([&]() {
        if (!cfg || !key || !value_out) raise(ErrCode::invalid, "null argument");
        *value_out = dup_string(cfg->cfg.get(key));
        return BITS_OK;
    });
}

bits_status bits_config_echo(const bits_config* cfg, char** text_out) {
    return guarded([&]() {
        if (!cfg || !text_out) raise(ErrCode::invalid, "null argument");
        *text_out = dup_string(cfg->cfg.echo());
        return BITS_OK;
    });
}

void bits_config_free(bits_config* cfg) { delete cfg; }

bits_status bits_dataset_open(const char* path, bits_dataset** out) {
    return guarded([&]() {
        if (!path || !out) raise(ErrCode::invalid, "null argument");
        *out = new bits_dataset{open_dataset_checked(path)};
        return BITS_OK;
    });
}

bits_status bits_dataset_synthetic(const char* spec_kv, uint64_t seed, bits_dataset** out) {
    return guarded([&]() {
        if (!out) raise(ErrCode::invalid, "null argument");
        SyntheticFactorSpec spec;
        if (spec_kv && *spec_kv) {
            std::string s(spec_kv);
            size_t pos = 0;
            while (pos < s.size()) {
                size_t end = s.find(',', pos);
                if (end == std::string::npos) end = s.size();
                const std::string item = s.substr(pos, end - pos);
                const size_t eq = item.find('=');
                if (eq == std::string::npos)
                    raise(ErrCode::config, "bad synthetic spec item '" + item + "'");
                const std::string key = item.substr(0, eq);
                const int value = std::atoi(item.c_str() + eq + 1);
                if (key == "image_size")
                    spec.image_size = value;
                else if (key == "samples_per_combination")
                    spec.samples_per_combination = value;
                else
                    raise(ErrCode::config, "unknown synthetic spec key '" + key + "'");
                pos = end + 1;
            }
        }
        *out = new bits_dataset{generate_synthetic(spec, seed)};
        return BITS_OK;
    });
}

bits_status bits_dataset_save(const bits_dataset* ds, const char* path) {
    return guarded([&]() {
        if (!ds || !path) raise(ErrCode::invalid, "null argument");
        write_dataset(ds->ds, path);
        return BITS_OK;
    });
}

bits_status bits_dataset_info(const bits_dataset* ds, uint32_t* n, uint32_t* h, uint32_t* w,
                              uint32_t* c) {
    return guarded([&]() {
        if (!ds) raise(ErrCode::invalid, "null argument");
        if (n) *n = ds->ds.n;
        if (h) *h = ds->ds.height;
        if (w) *w = ds->ds.width;
        if (c) *c = ds->ds.channels;
        return BITS_OK;
    });
}

void bits_dataset_free(bits_dataset* ds) { delete ds; }

bits_status bits_train(const bits_config* cfg) {
    return guarded([&]() {
        if (!cfg) raise(ErrCode::invalid, "null config");
        RunConfig rc = cfg->cfg;
        apply_threads(rc);
        const std::string out_dir = rc.get("out_dir");
        if (out_dir.empty()) raise(ErrCode::config, "out_dir is required");
        ImageDataset data = open_dataset_checked(rc.get("dataset"));
        rc.resolve_input_shape(data);
        std::filesystem::create_directories(out_dir);
        write_text(out_dir + "/config.echo", rc.echo());
        train(rc.train_config(), rc.model_config(), rc.augment_policy(), data, out_dir,
              rc.get("resume_from"));
        return BITS_OK;
    });
}

bits_status bits_finetune(const bits_config* cfg, const char* checkpoint) {
    return guarded([&]() {
        if (!cfg || !checkpoint) raise(ErrCode::invalid, "null argument");
        RunConfig rc = cfg->cfg;
        apply_threads(rc);
        const std::string out_dir = rc.get("out_dir");
        if (out_dir.empty()) raise(ErrCode::config, "out_dir is required");
        ImageDataset data = open_dataset_checked(rc.get("dataset"));
        std::filesystem::create_directories(out_dir);
        write_text(out_dir + "/config.echo", rc.echo());
        finetune(rc.train_config(), checkpoint, rc.augment_policy(), data, out_dir,
                 rc.boolean("reset_at_start"));
        return BITS_OK;
    });
}

bits_status bits_eval(const char* checkpoint, const char* dataset, const char* task,
                      const bits_config* options, char** json_out) {
    return guarded([&]() {
        if (!checkpoint || !dataset || !task || !json_out) raise(ErrCode::invalid, "null argument");
        RunConfig rc = options ? options->cfg : RunConfig();
        apply_threads(rc);
        const std::string taskname(task);
        if (taskname != "knn" && taskname != "probe" && taskname != "retrieval")
            raise(ErrCode::config, "unknown eval task '" + taskname + "'");

        const Checkpoint ckpt = load_checkpoint(checkpoint);
        ImageDataset data = open_dataset_checked(dataset);
        const Branch branch = branch_from(rc.get("branch"));
        const uint64_t eval_seed = uint64_t(rc.integer("eval_seed"));

        nlohmann::json report;
        report["task"] = taskname;
        report["branch"] = branch_name(branch);
        report["n"] = data.n;

        if (taskname == "retrieval") {
            const std::string metric = rc.get("metric");
            report["metric"] = metric;
            if (metric == "cosine") {
                Extraction ex = extract(ckpt, data, ExtractWhat::features, branch);
                report["map"] = retrieval_map(ex.features);
            } else if (metric == "hamming") {
                Extraction ex = extract(ckpt, data, ExtractWhat::codes, branch);
                BinaryCodeSet codes = std::move(ex.codes);
                const int bitn = int(rc.integer("bits"));
                if (bitn > 0 && bitn < codes.bits)
                    codes = subsample_bits(codes, bitn, eval_seed);
                report["bits"] = codes.bits;
                report["map"] = retrieval_map(codes, ex.labels);
            } else {
                raise(ErrCode::config, "unknown retrieval metric '" + metric + "'");
            }
        } else {
            Extraction ex = extract(ckpt, data, ExtractWhat::features, branch);
            auto [tr, te] = split_features(ex.features, rc.num("split"), eval_seed);
            report["n_train"] = tr.n;
            report["n_test"] = te.n;
            if (taskname == "knn") {
                const int k = int(rc.integer("k"));
                const double temp = rc.num("temp");
                report["k"] = k;
                report["temp"] = temp;
                report["accuracy"] = knn_classify(tr, te, k, temp);
            } else {
                const int pe = int(rc.integer("probe_epochs"));
                const double plr = rc.num("probe_lr");
                report["epochs"] = pe;
                report["lr"] = plr;
                report["accuracy"] = linear_probe(tr, te, pe, plr);
            }
        }
        report["options"] = options_echo(rc);
        *json_out = dup_string(report.dump(2));
        return BITS_OK;
    });
}

bits_status bits_analyze(const char* checkpoint, const char* dataset, const char* what,
                         const bits_config* options, const char* out_dir, char** json_out) {
    return guarded([&]() {
        if (!checkpoint || !dataset || !what || !out_dir || !json_out)
            raise(ErrCode::invalid, "null argument");
        RunConfig rc = options ? options->cfg : RunConfig();
        apply_threads(rc);
        const std::string wh(what);
        if (wh != "spectrum" && wh != "entropy" && wh != "bits" && wh != "mi")
            raise(ErrCode::config, "unknown analyze target '" + wh + "'");

        const Checkpoint ckpt = load_checkpoint(checkpoint);
        ImageDataset data = open_dataset_checked(dataset);
        const Branch branch = branch_from(rc.get("branch"));
        std::filesystem::create_directories(out_dir);
        const std::string dir(out_dir);

        nlohmann::json report;
        report["what"] = wh;
        report["branch"] = branch_name(branch);

        if (wh == "spectrum") {
            Extraction ex = extract(ckpt, data, ExtractWhat::features, branch);
            Tensor<float> feats(Shape{ex.features.n, ex.features.dim}, ex.features.features);
            const SpectrumSummary sum = spectrum_summary(feats);
            std::string csv = "dimension,cv\n";
            for (size_t i = 0; i < sum.cumulative_variance.size(); ++i)
                csv += std::to_string(i + 1) + "," +
                       nlohmann::json(sum.cumulative_variance[i]).dump() + "\n";
            write_text(dir + "/spectrum_cv.csv", csv);
            report["d_eff"] = sum.d_eff;
            report["r_eff"] = sum.r_eff;
            report["dim"] = ex.features.dim;
            report["n"] = ex.features.n;
            write_text(dir + "/spectrum.json", report.dump(2));
        } else {
            Extraction ex = extract(ckpt, data, ExtractWhat::codes, branch);
            write_codes(ex.codes, ex.labels, dir + "/codes.bitscode");
            if (wh == "entropy") {
                const int block = int(rc.integer("block"));
                const EntropyReport er = code_entropy(ex.codes, block);
                report["block_size"] = er.block_size;
                report["marginal_mean"] = er.marginal_mean;
                report["block_mean"] = er.block_mean;
                report["marginal"] = er.marginal;
                report["block"] = er.block;
                std::string csv = "bit,entropy\n";
                for (size_t i = 0; i < er.marginal.size(); ++i)
                    csv += std::to_string(i) + "," + nlohmann::json(er.marginal[i]).dump() + "\n";
                write_text(dir + "/entropy_marginal.csv", csv);
                csv = "block,entropy\n";
                for (size_t i = 0; i < er.block.size(); ++i)
                    csv += std::to_string(i) + "," + nlohmann::json(er.block[i]).dump() + "\n";
                write_text(dir + "/entropy_block.csv", csv);
                write_text(dir + "/entropy.json", report.dump(2));
            } else if (wh == "bits") {
                if (ex.labels.empty()) raise(ErrCode::data, "bit report requires labels");
                const int bit = int(rc.integer("bit"));
                const auto rep = bit_condition_report(ex.codes, ex.labels, bit);
                report["report"] = bit_condition_json(rep, bit);
                write_text(dir + "/bit_condition.json", report.dump(2));
            } else {  // mi
                if (!data.has_factors())
                    raise(ErrCode::data, "mi analysis requires factor data in the dataset");
                const auto mi =
                    factor_bit_mutual_information(ex.codes, data.factors, data.factor_dim);
                report["bits"] = ex.codes.bits;
                report["factor_dim"] = data.factor_dim;
                nlohmann::json rows = nlohmann::json::array();
                std::string csv = "bit";
                for (int f = 0; f < data.factor_dim; ++f) csv += ",factor" + std::to_string(f);
                csv += "\n";
                for (int b = 0; b < ex.codes.bits; ++b) {
                    nlohmann::json row = nlohmann::json::array();
                    csv += std::to_string(b);
                    for (int f = 0; f < data.factor_dim; ++f) {
                        const double v = mi[size_t(b) * data.factor_dim + f];
                        row.push_back(v);
                        csv += "," + nlohmann::json(v).dump();
                    }
                    csv += "\n";
                    rows.push_back(row);
                }
                report["mi"] = rows;
                write_text(dir + "/mi.csv", csv);
                write_text(dir + "/mi.json", report.dump(2));
            }
        }
        *json_out = dup_string(report.dump(2));
        return BITS_OK;
    });
}

bits_status bits_verify(const char* inject_fault, char** report_out) {
    return guarded([&]() {
        const VerifyReport rep = run_verification(inject_fault ? inject_fault : "");
        if (report_out) *report_out = dup_string(rep.table());
        return rep.all_pass ? BITS_OK : BITS_ERR_FAIL;
    });
}

}  // extern "C"
