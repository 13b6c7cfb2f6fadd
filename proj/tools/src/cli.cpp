#include <CLI11.hpp>

#include <iostream>

#include "commands.hpp"
#include "vcdm/errors.hpp"
#include "vcdm/toy.hpp"

namespace vcdm::cli {

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Two-stage conditional diffusion: embeddings, training, sampling and evaluation", "vcdm"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<long> seed;
    std::optional<std::string> method;
    std::optional<int> count;
    std::optional<std::string> out_dir;

    auto add_common = [&](CLI::App* cmd, bool sampling) {
        cmd->add_option("--config", config_path, "experiment config (key = value lines)")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "override a config key, e.g. --set image.steps=100");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--out", out_dir, "artifact directory");
        if (sampling) {
            cmd->add_option("--method", method, "vcdm, edm, class-cond or oracle")
                ->check(CLI::IsMember({"vcdm", "edm", "class-cond", "oracle"}));
            cmd->add_option("--count", count, "number of samples");
        }
    };

    auto* cache = app.add_subcommand("cache-embeddings", "embed every manifest image once");
    add_common(cache, false);

    auto* train = app.add_subcommand("train", "train the embedding prior or the image model");
    add_common(train, true);
    std::string which = "image";
    long max_steps = -1;
    train->add_option("--which", which, "aux or image")->check(CLI::IsMember({"aux", "image"}));
    train->add_option("--max-steps", max_steps, "stop after this many total steps (resumable)");

    auto* sample = app.add_subcommand("sample", "draw samples with one method");
    add_common(sample, true);

    auto* evaluate = app.add_subcommand("eval", "score every stored checkpoint of a method");
    add_common(evaluate, true);
    bool plot_eval = false;
    evaluate->add_flag("--plot", plot_eval, "also write score vs step as SVG");

    auto* sweep = app.add_subcommand("sweep-dim", "score vs conditioning dimensionality");
    add_common(sweep, false);

    auto* plot = app.add_subcommand("plot", "render a metrics or sweep CSV as SVG");
    std::string csv, svg;
    plot->add_option("--csv", csv, "metrics or sweep CSV")->required()->check(CLI::ExistingFile);
    plot->add_option("--svg", svg, "output SVG")->required();

    auto* discs = app.add_subcommand("make-disc-dataset", "write the procedural disc image set with a manifest");
    std::string disc_dir;
    int disc_n = 200, disc_res = 16, disc_classes = 4;
    std::uint64_t disc_seed = 0;
    discs->add_option("--dir", disc_dir, "output directory")->required();
    discs->add_option("--n", disc_n, "number of images")->check(CLI::PositiveNumber);
    discs->add_option("--resolution", disc_res, "image side in pixels")->check(CLI::PositiveNumber);
    discs->add_option("--classes", disc_classes, "number of classes")->check(CLI::PositiveNumber);
    discs->add_option("--seed", disc_seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (plot->parsed()) {
            cmd_plot(csv, svg);
            out << "wrote " << svg << "\n";
            return 0;
        }
        if (discs->parsed()) {
            const auto m = toy::write_disc_dataset(disc_dir, disc_n, disc_res, disc_classes, disc_seed);
            out << "wrote " << m.rows.size() << " images and " << (std::filesystem::path(disc_dir) / "manifest.jsonl").string()
                << "\n";
            return 0;
        }
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (seed) cfg.set("seed", std::to_string(*seed));
        if (method) cfg.set("method", *method);
        if (count) cfg.set("sample.count", std::to_string(*count));
        if (out_dir) cfg.set("out_dir", *out_dir);
        Context ctx = Context::from_config(std::move(cfg));
        ctx.log = &out;
        out << "config " << ctx.hash() << " (training " << training_hash(ctx) << "), seed " << ctx.seed << "\n";

        if (cache->parsed()) {
            cmd_cache_embeddings(ctx);
        } else if (train->parsed()) {
            const auto r = cmd_train(ctx, which == "aux" ? Which::kAux : Which::kImage, max_steps);
            out << "loss curve: " << r.loss_csv.string() << "\n";
        } else if (sample->parsed()) {
            const auto r = cmd_sample(ctx);
            out << "tensor: " << r.tensor.string() << "\n";
        } else if (evaluate->parsed()) {
            const auto r = cmd_eval(ctx, plot_eval);
            out << r.rows.size() << " rows appended to " << r.csv.string() << "\n";
        } else if (sweep->parsed()) {
            const auto r = cmd_sweep_dim(ctx);
            out << r.rows.size() << " rows written to " << r.csv.string() << "\n";
        }
        return 0;
    } catch (const Error& e) {
        err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace vcdm::cli
