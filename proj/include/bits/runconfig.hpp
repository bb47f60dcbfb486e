#pragma once

#include <map>
#include <string>
#include <vector>

#include "bits/augment.hpp"
#include "bits/trainer.hpp"

namespace bits {

// Flat key = value configuration covering every tunable plus paths. Unknown
// keys are rejected; every key has a documented default; the effective
// (post-default) config can be echoed for the output directory.
class RunConfig {
public:
    struct KeySpec {
        std::string def;
        std::string doc;
    };

    // ordered registry: key -> default + one-line doc
    static const std::vector<std::pair<std::string, KeySpec>>& registry();

    RunConfig();  // all defaults
    static RunConfig from_file(const std::string& path);
    static RunConfig from_text(const std::string& text, const std::string& origin = "<text>");

    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;

    double num(const std::string& key) const;
    int64_t integer(const std::string& key) const;
    bool boolean(const std::string& key) const;

    // sorted `key = value` lines, one per registry entry
    std::string echo() const;

    TrainConfig train_config() const;
    ModelConfig model_config() const;  // requires resolved input shape
    AugmentPolicy augment_policy() const;

    // fills input_h/input_w/input_c from the dataset when left at 0
    void resolve_input_shape(const ImageDataset& ds);

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace bits
