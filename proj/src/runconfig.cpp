#include "bits/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace bits {

const std::vector<std::pair<std::string, RunConfig::KeySpec>>& RunConfig::registry() {
    static const std::vector<std::pair<std::string, KeySpec>> reg = {
        // paths / run plumbing
        {"dataset", {"", "path to a BITSDS1 dataset file"}},
        {"out_dir", {"", "output directory (metrics, checkpoints, config echo)"}},
        {"resume_from", {"", "checkpoint to resume an interrupted run from"}},
        {"reset_at_start", {"false", "finetune: one head reset before epoch 1"}},
        {"workers", {"0", "worker threads for kernels/views; 0 = single-threaded"}},
        // trainer
        {"epochs", {"20", "training epochs"}},
        {"batch_size", {"128", "samples per step (>= 2)"}},
        {"base_lr", {"0.001", "peak learning rate after warmup"}},
        {"min_lr", {"5e-05", "end-of-training learning rate floor"}},
        {"warmup_epochs", {"3", "linear warmup length in epochs"}},
        {"weight_decay", {"0.04", "decoupled weight decay (skips biases)"}},
        {"clip_norm", {"1.0", "global gradient norm cap cg"}},
        {"reset_period", {"10", "head reset every n epochs; 0 = never"}},
        {"head_reset_both", {"true", "reset teacher head together with the student head"}},
        {"ema_start", {"0.996", "teacher EMA momentum at step 0"}},
        {"ema_end", {"1.0", "teacher EMA momentum at the final step"}},
        {"seed", {"0", "global seed (shuffles, augmentation, init)"}},
        {"checkpoint_every", {"10", "checkpoint every this many epochs"}},
        // objective
        {"agreement", {"bce-hard", "agreement mode: bce-hard | bce-soft | cosine"}},
        {"beta", {"0.1", "coding-rate weight in the total loss"}},
        {"eps", {"0.5", "coding-rate epsilon"}},
        {"tau", {"0.1", "soft-target temperature (bce-soft)"}},
        {"bit_norm", {"mean-over-bits", "loss reduction: mean-over-bits | sum-over-bits"}},
        {"rate_dscale", {"0", "rate-term scale constant; 0 = logit dimension B"}},
        // model
        {"backbone", {"small-conv", "backbone: mlp | small-conv"}},
        {"backbone_dim", {"128", "backbone output dimension d"}},
        {"head_hidden", {"512", "projection head hidden width"}},
        {"head_out", {"256", "projection head output bits B (multiple of 8)"}},
        {"activation", {"gelu", "activation: gelu | relu"}},
        {"mlp_hidden", {"256", "hidden width of the mlp backbone"}},
        {"input_h", {"0", "input height; 0 = take from dataset"}},
        {"input_w", {"0", "input width; 0 = take from dataset"}},
        {"input_c", {"0", "input channels; 0 = take from dataset"}},
        // augmentation
        {"crop_min", {"0.4", "global crop area fraction, lower bound"}},
        {"crop_max", {"1.0", "global crop area fraction, upper bound"}},
        {"local_crop_min", {"0.1", "local crop area fraction, lower bound"}},
        {"local_crop_max", {"0.4", "local crop area fraction, upper bound"}},
        {"flip_prob", {"0.5", "horizontal flip probability"}},
        {"brightness", {"0.4", "additive brightness jitter range"}},
        {"contrast", {"0.4", "contrast jitter range"}},
        {"noise_std", {"0.02", "gaussian pixel noise std"}},
        {"blur_prob", {"0.5", "3x3 box blur probability"}},
        {"n_global", {"2", "global views per sample"}},
        {"n_local", {"0", "local views per sample (student only)"}},
        // eval / analyze options
        {"k", {"20", "kNN neighbour count"}},
        {"temp", {"0.07", "kNN vote temperature"}},
        {"split", {"0.5", "train fraction for knn/probe evaluation splits"}},
        {"eval_seed", {"0", "seed for evaluation splits and bit subsampling"}},
        {"metric", {"cosine", "retrieval metric: cosine | hamming"}},
        {"bits", {"0", "retrieval bit subsample size; 0 = all bits"}},
        {"block", {"8", "block size for code entropy"}},
        {"bit", {"0", "bit index for the bit-conditioned report"}},
        {"branch", {"teacher", "branch for extraction: teacher | student"}},
        {"probe_epochs", {"200", "linear probe training epochs"}},
        {"probe_lr", {"0.5", "linear probe learning rate"}},
    };
    return reg;
}

RunConfig::RunConfig() {
    for (const auto& [k, spec] : registry()) kv_[k] = spec.def;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            raise(ErrCode::config, origin + ":" + std::to_string(lineno) +
                                       ": expected 'key = value', got '" + line + "'");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) raise(ErrCode::config, "cannot open config file: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return from_text(buf.str(), path);
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = kv_.find(key);
    if (it == kv_.end()) raise(ErrCode::config, "unknown config key '" + key + "'");
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) raise(ErrCode::config, "unknown config key '" + key + "'");
    return it->second;
}

double RunConfig::num(const std::string& key) const {
    const std::string& v = get(key);
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        raise(ErrCode::config, "config key '" + key + "': not a number: '" + v + "'");
    }
}

int64_t RunConfig::integer(const std::string& key) const {
    const std::string& v = get(key);
    try {
        size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        raise(ErrCode::config, "config key '" + key + "': not an integer: '" + v + "'");
    }
}

bool RunConfig::boolean(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    raise(ErrCode::config, "config key '" + key + "': not a boolean: '" + v + "'");
}

std::string RunConfig::echo() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.epochs = int(integer("epochs"));
    t.batch_size = int(integer("batch_size"));
    t.base_lr = num("base_lr");
    t.min_lr = num("min_lr");
    t.warmup_epochs = num("warmup_epochs");
    t.weight_decay = num("weight_decay");
    t.clip_norm = num("clip_norm");
    t.reset_period = int(integer("reset_period"));
    t.head_reset_both = boolean("head_reset_both");
    t.ema_start = num("ema_start");
    t.ema_end = num("ema_end");
    t.seed = uint64_t(integer("seed"));
    t.checkpoint_every = int(integer("checkpoint_every"));
    t.workers = int(integer("workers"));
    t.agreement.mode = agreement_mode_from(get("agreement"));
    t.agreement.beta = num("beta");
    t.agreement.eps = num("eps");
    t.agreement.tau = num("tau");
    t.agreement.bit_norm = bit_norm_from(get("bit_norm"));
    t.agreement.rate_dscale = num("rate_dscale");
    t.validate();
    return t;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.backbone = backbone_from(get("backbone"));
    m.backbone_dim = int(integer("backbone_dim"));
    m.head_hidden = int(integer("head_hidden"));
    m.head_out = int(integer("head_out"));
    m.activation = activation_from(get("activation"));
    m.init_seed = uint64_t(integer("seed"));
    m.mlp_hidden = int(integer("mlp_hidden"));
    m.in_h = int(integer("input_h"));
    m.in_w = int(integer("input_w"));
    m.in_c = int(integer("input_c"));
    if (m.in_h <= 0 || m.in_w <= 0 || m.in_c <= 0)
        raise(ErrCode::config, "input shape unresolved; set input_h/input_w/input_c or a dataset");
    m.validate();
    return m;
}

AugmentPolicy RunConfig::augment_policy() const {
    AugmentPolicy p;
    p.crop_min = num("crop_min");
    p.crop_max = num("crop_max");
    p.local_crop_min = num("local_crop_min");
    p.local_crop_max = num("local_crop_max");
    p.flip_prob = num("flip_prob");
    p.brightness = num("brightness");
    p.contrast = num("contrast");
    p.noise_std = num("noise_std");
    p.blur_prob = num("blur_prob");
    p.n_global = int(integer("n_global"));
    p.n_local = int(integer("n_local"));
    p.validate();
    return p;
}

void RunConfig::resolve_input_shape(const ImageDataset& ds) {
    if (integer("input_h") == 0) set("input_h", std::to_string(ds.height));
    if (integer("input_w") == 0) set("input_w", std::to_string(ds.width));
    if (integer("input_c") == 0) set("input_c", std::to_string(ds.channels));
}

}  // namespace bits
