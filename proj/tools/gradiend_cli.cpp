#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"

#include "gradiend/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    bool have_seed = false;
    uint64_t seed = 0;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "run configuration JSON")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", opts.seed, "override the global seed")
        ->each([&opts](const std::string&) { opts.have_seed = true; });
    cmd->add_option("--out", opts.out_dir, "output directory");
}

gradiend::RunConfig resolve_config(const CommonOpts& opts) {
    gradiend::RunConfig cfg;
    if (!opts.config_path.empty()) cfg = gradiend::RunConfig::load_file(opts.config_path);
    if (opts.have_seed) cfg.seed = opts.seed;
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradient feature-neuron trainer and model rewriter"};
    app.require_subcommand(1);

    struct Verb {
        const char* name;
        const char* help;
        void (gradiend::Pipeline::*stage)();
    };
    const Verb verbs[] = {
        {"gen-data", "generate the synthetic datasets", &gradiend::Pipeline::gen_data},
        {"train-lm", "pretrain the base masked-token model", &gradiend::Pipeline::train_lm},
        {"train-gradiend", "train the gradient encoder-decoder",
         &gradiend::Pipeline::train_gradiend},
        {"eval-encoder", "encode evaluation texts and report correlations",
         &gradiend::Pipeline::eval_encoder},
        {"sweep", "evaluate the (h, alpha) rewrite grid", &gradiend::Pipeline::run_sweep},
        {"select", "pick debiased/biased cells and save rewritten models",
         &gradiend::Pipeline::run_select},
        {"report", "emit metrics.csv with bootstrap intervals", &gradiend::Pipeline::report},
    };

    CommonOpts opts;
    std::vector<std::pair<CLI::App*, void (gradiend::Pipeline::*)()>> dispatch;
    for (const Verb& v : verbs) {
        CLI::App* cmd = app.add_subcommand(v.name, v.help);
        add_common(cmd, opts);
        dispatch.emplace_back(cmd, v.stage);
    }
    CLI::App* run_cmd = app.add_subcommand("run", "run the full pipeline");
    add_common(run_cmd, opts);

    CLI11_PARSE(app, argc, argv);

    try {
        gradiend::Pipeline pipeline(resolve_config(opts));
        if (run_cmd->parsed()) {
            pipeline.run();
        } else {
            for (const auto& [cmd, stage] : dispatch)
                if (cmd->parsed()) (pipeline.*stage)();
        }
        std::printf("done; artifacts in %s\n", pipeline.out.string().c_str());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
