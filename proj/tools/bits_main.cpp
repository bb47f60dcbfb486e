// bits: train / finetune / eval / analyze / verify / gen over the C API.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bits/capi.h"

namespace {

int fail_with(bits_status st) {
    const char* msg = bits_last_error();
    if (msg && *msg) std::fprintf(stderr, "error: %s\n", msg);
    return int(st);
}

struct ConfigHandle {
    bits_config* cfg = nullptr;
    ~ConfigHandle() { bits_config_free(cfg); }
};

int apply_sets(bits_config* cfg, const std::vector<std::string>& sets) {
    for (const std::string& kv : sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            return int(BITS_ERR_CONFIG);
        }
        const bits_status st =
            bits_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
        if (st != BITS_OK) return fail_with(st);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BITS: self-supervised learning over a binary communication channel"};
    app.require_subcommand(1);

    // train
    std::string train_config;
    std::vector<std::string> train_sets;
    CLI::App* train = app.add_subcommand("train", "run self-supervised training");
    train->add_option("config", train_config, "key = value config file")->required();
    train->add_option("--set", train_sets, "override a config key (key=value)");

    // finetune
    std::string ft_config, ft_ckpt;
    std::vector<std::string> ft_sets;
    bool ft_reset = false;
    CLI::App* ft = app.add_subcommand("finetune", "continued self-supervised training");
    ft->add_option("config", ft_config, "key = value config file")->required();
    ft->add_option("checkpoint", ft_ckpt, "checkpoint to start from")->required();
    ft->add_option("--set", ft_sets, "override a config key (key=value)");
    ft->add_flag("--reset-at-start", ft_reset, "one head reset before epoch 1");

    // eval
    std::string ev_ckpt, ev_data, ev_task, ev_metric, ev_branch, ev_out;
    int ev_bits = -1, ev_k = -1;
    double ev_temp = -1.0, ev_split = -1.0;
    int64_t ev_seed = -1;
    CLI::App* ev = app.add_subcommand("eval", "knn / probe / retrieval evaluation");
    ev->add_option("checkpoint", ev_ckpt)->required();
    ev->add_option("dataset", ev_data)->required();
    ev->add_option("--task", ev_task, "knn | probe | retrieval")->required();
    ev->add_option("--metric", ev_metric, "retrieval metric: cosine | hamming");
    ev->add_option("--bits", ev_bits, "retrieval bit subsample size");
    ev->add_option("--k", ev_k, "kNN neighbours");
    ev->add_option("--temp", ev_temp, "kNN vote temperature");
    ev->add_option("--split", ev_split, "train fraction for knn/probe");
    ev->add_option("--seed", ev_seed, "evaluation seed (splits, subsampling)");
    ev->add_option("--branch", ev_branch, "teacher | student");
    ev->add_option("--out", ev_out, "also write the JSON report here");

    // analyze
    std::string an_ckpt, an_data, an_what, an_branch, an_dir = "reports";
    int an_block = -1, an_bit = -1;
    CLI::App* an = app.add_subcommand("analyze", "spectrum / entropy / bits / mi analyses");
    an->add_option("checkpoint", an_ckpt)->required();
    an->add_option("dataset", an_data)->required();
    an->add_option("--what", an_what, "spectrum | entropy | bits | mi")->required();
    an->add_option("--block", an_block, "entropy block size");
    an->add_option("--bit", an_bit, "bit index for the conditioned report");
    an->add_option("--branch", an_branch, "teacher | student");
    an->add_option("--out-dir", an_dir, "report directory (default: reports)");

    // verify
    std::string vf_fault;
    CLI::App* vf = app.add_subcommand("verify", "gradient and oracle verification suite");
    vf->add_option("--inject-fault", vf_fault, "test hook: logdet-grad-sign");

    // gen
    std::string gen_out;
    int64_t gen_seed = 0;
    int gen_size = 32, gen_per = 10;
    CLI::App* gen = app.add_subcommand("gen", "generate the synthetic factor dataset");
    gen->add_option("--out", gen_out, "output BITSDS1 path")->required();
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--image-size", gen_size, "square image size");
    gen->add_option("--per-combo", gen_per, "samples per factor combination");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return int(BITS_ERR_CONFIG);
    }

    if (train->parsed()) {
        ConfigHandle h;
        bits_status st = bits_config_load(train_config.c_str(), &h.cfg);
        if (st != BITS_OK) return fail_with(st);
        if (int rc = apply_sets(h.cfg, train_sets)) return rc;
        st = bits_train(h.cfg);
        if (st != BITS_OK) return fail_with(st);
        return 0;
    }

    if (ft->parsed()) {
        ConfigHandle h;
        bits_status st = bits_config_load(ft_config.c_str(), &h.cfg);
        if (st != BITS_OK) return fail_with(st);
        if (int rc = apply_sets(h.cfg, ft_sets)) return rc;
        if (ft_reset && (st = bits_config_set(h.cfg, "reset_at_start", "true")) != BITS_OK)
            return fail_with(st);
        st = bits_finetune(h.cfg, ft_ckpt.c_str());
        if (st != BITS_OK) return fail_with(st);
        return 0;
    }

    if (ev->parsed()) {
        ConfigHandle h;
        bits_status st = bits_config_create(&h.cfg);
        if (st != BITS_OK) return fail_with(st);
        auto setk = [&](const char* key, const std::string& v) {
            return v.empty() ? BITS_OK : bits_config_set(h.cfg, key, v.c_str());
        };
        if ((st = setk("metric", ev_metric)) != BITS_OK) return fail_with(st);
        if ((st = setk("branch", ev_branch)) != BITS_OK) return fail_with(st);
        if (ev_bits >= 0) bits_config_set(h.cfg, "bits", std::to_string(ev_bits).c_str());
        if (ev_k >= 0) bits_config_set(h.cfg, "k", std::to_string(ev_k).c_str());
        if (ev_temp >= 0) bits_config_set(h.cfg, "temp", std::to_string(ev_temp).c_str());
        if (ev_split >= 0) bits_config_set(h.cfg, "split", std::to_string(ev_split).c_str());
        if (ev_seed >= 0) bits_config_set(h.cfg, "eval_seed", std::to_string(ev_seed).c_str());
        char* json = nullptr;
        st = bits_eval(ev_ckpt.c_str(), ev_data.c_str(), ev_task.c_str(), h.cfg, &json);
        if (st != BITS_OK) return fail_with(st);
        std::printf("%s\n", json);
        if (!ev_out.empty()) {
            std::FILE* f = std::fopen(ev_out.c_str(), "w");
            if (f) {
                std::fputs(json, f);
                std::fclose(f);
            }
        }
        bits_string_free(json);
        return 0;
    }

    if (an->parsed()) {
        ConfigHandle h;
        bits_status st = bits_config_create(&h.cfg);
        if (st != BITS_OK) return fail_with(st);
        if (!an_branch.empty() &&
            (st = bits_config_set(h.cfg, "branch", an_branch.c_str())) != BITS_OK)
            return fail_with(st);
        if (an_block >= 0) bits_config_set(h.cfg, "block", std::to_string(an_block).c_str());
        if (an_bit >= 0) bits_config_set(h.cfg, "bit", std::to_string(an_bit).c_str());
        char* json = nullptr;
        st = bits_analyze(an_ckpt.c_str(), an_data.c_str(), an_what.c_str(), h.cfg,
                          an_dir.c_str(), &json);
        if (st != BITS_OK) return fail_with(st);
        std::printf("%s\n", json);
        bits_string_free(json);
        return 0;
    }

    if (vf->parsed()) {
        char* report = nullptr;
        const bits_status st = bits_verify(vf_fault.empty() ? nullptr : vf_fault.c_str(), &report);
        if (report) {
            std::printf("%s", report);
            bits_string_free(report);
        }
        if (st != BITS_OK && st != BITS_ERR_FAIL) return fail_with(st);
        return int(st);
    }

    if (gen->parsed()) {
        const std::string spec = "image_size=" + std::to_string(gen_size) +
                                 ",samples_per_combination=" + std::to_string(gen_per);
        bits_dataset* ds = nullptr;
        bits_status st = bits_dataset_synthetic(spec.c_str(), uint64_t(gen_seed), &ds);
        if (st != BITS_OK) return fail_with(st);
        st = bits_dataset_save(ds, gen_out.c_str());
        uint32_t n = 0, hh = 0, ww = 0, cc = 0;
        bits_dataset_info(ds, &n, &hh, &ww, &cc);
        bits_dataset_free(ds);
        if (st != BITS_OK) return fail_with(st);
        std::printf("wrote %u samples (%ux%ux%u) to %s\n", n, hh, ww, cc, gen_out.c_str());
        return 0;
    }

    return int(BITS_ERR_CONFIG);
}
