#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "bits/trainer.hpp"

namespace bits {

struct FeatureSet {
    int n = 0, dim = 0;
    std::vector<float> features;      // n * dim
    std::vector<uint16_t> labels;     // optional
    int factor_dim = 0;
    std::vector<uint16_t> factors;    // optional, n * factor_dim

    const float* row(int i) const { return features.data() + int64_t(i) * dim; }
    void validate() const;
};

// Bit-packed codes: bit b of sample i lives at byte i*(B/8) + b/8,
// least-significant-bit first within the byte.
struct BinaryCodeSet {
    int n = 0;
    int bits = 0;  // B, multiple of 8
    std::vector<uint8_t> packed;

    int bytes_per_sample() const { return bits / 8; }
    const uint8_t* row(int i) const { return packed.data() + int64_t(i) * bytes_per_sample(); }
    bool get(int i, int b) const { return (row(i)[b / 8] >> (b % 8)) & 1; }
    void set(int i, int b, bool v) {
        uint8_t& byte = packed[int64_t(i) * bytes_per_sample() + b / 8];
        if (v)
            byte = uint8_t(byte | (1u << (b % 8)));
        else
            byte = uint8_t(byte & ~(1u << (b % 8)));
    }
    void validate() const;
};

// BITSCODE container: magic, u32 version, u32 n, u32 B, packed bits, u8
// label flag, labels (u16 * n) when present.
void write_codes(const BinaryCodeSet& codes, const std::vector<uint16_t>& labels,
                 const std::string& path);
std::pair<BinaryCodeSet, std::vector<uint16_t>> read_codes(const std::string& path);

enum class ExtractWhat { features, codes };

// Deterministic extraction: center-crop views, checkpoint normalization
// stats, no augmentation. Codes are hard-thresholded head logits of the
// chosen branch (teacher by default).
struct Extraction {
    FeatureSet features;    // filled when what == features
    BinaryCodeSet codes;    // filled when what == codes
    std::vector<uint16_t> labels;
};
Extraction extract(const Checkpoint& ckpt, const ImageDataset& data, ExtractWhat what,
                   Branch branch = Branch::teacher);

// Mean cross-view teacher/student hard-bit agreement under the training view
// pairing, seeded augmentation; the held-out counterpart of the training
// diagnostic.
double crossview_bit_agreement(const Checkpoint& ckpt, const ImageDataset& data,
                               const AugmentPolicy& policy, uint64_t seed, int batch_size = 128);

// Cosine-similarity weighted kNN vote (weights exp(sim/temp)); ties broken
// toward the smaller class id.
double knn_classify(const FeatureSet& train, const FeatureSet& test, int k = 20,
                    double temp = 0.07);

// Single affine layer + softmax cross-entropy on frozen features, full-batch
// gradient descent from zero init.
double linear_probe(const FeatureSet& train, const FeatureSet& test, int epochs = 200,
                    double lr = 0.5);

enum class RetrievalMetric { cosine, hamming };

// mAP@ALL: every sample queries all others, relevance = label equality,
// AP = mean precision at each relevant rank. Hamming ties break by ascending
// sample index.
double retrieval_map(const FeatureSet& db);
double retrieval_map(const BinaryCodeSet& codes, const std::vector<uint16_t>& labels);

// Uniform random bit subset (sorted, so m == B reproduces the input), seeded.
BinaryCodeSet subsample_bits(const BinaryCodeSet& codes, int m, uint64_t seed);

struct EntropyReport {
    std::vector<double> marginal;     // per bit, bits
    double marginal_mean = 0.0;
    std::vector<double> block;        // per contiguous block, bits
    double block_mean = 0.0;
    int block_size = 0;
};
EntropyReport code_entropy(const BinaryCodeSet& codes, int block_size);

struct BitConditionClass {
    uint16_t label = 0;
    std::vector<int> ids_bit0, ids_bit1;
    double activation_rate = 0.0;
};
std::vector<BitConditionClass> bit_condition_report(const BinaryCodeSet& codes,
                                                    const std::vector<uint16_t>& labels,
                                                    int bit_index);
nlohmann::json bit_condition_json(const std::vector<BitConditionClass>& report, int bit_index);

// Plug-in mutual information (bits) between each code bit and each factor,
// [B x F] row-major.
std::vector<double> factor_bit_mutual_information(const BinaryCodeSet& codes,
                                                  const std::vector<uint16_t>& factors,
                                                  int factor_dim);

// Hamming distance on packed rows.
int hamming_distance(const uint8_t* a, const uint8_t* b, int nbytes);

}  // namespace bits
