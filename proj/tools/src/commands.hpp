#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"
#include "dataset.hpp"
#include "vcdm/errors.hpp"
#include "vcdm/evaluation.hpp"
#include "vcdm/pipeline.hpp"

namespace vcdm::cli {

// Resolved per-invocation settings: the config plus command-line overrides.
struct Context {
    ExperimentConfig cfg;
    Paths paths;
    std::uint64_t seed = 0;
    pipeline::Method method = pipeline::Method::kVcdm;
    int count = 16;
    std::ostream* log = nullptr;  // human-readable progress; may be null

    // Applies out_dir, seed, method and sample.count from cfg.
    static Context from_config(ExperimentConfig cfg);
    std::string hash() const { return cfg.hash(); }
};

// Hash of the keys that affect training; used in checkpoint names so that
// sampler or evaluation edits do not orphan trained models.
std::string training_hash(const Context& ctx);

// Training run names; checkpoint files follow train::checkpoint_path.
std::string aux_run_name(const Context& ctx);
std::string image_run_name(const Context& ctx, image_model::Regime regime);
std::filesystem::path codebook_path(const Context& ctx);
image_model::Regime regime_for(pipeline::Method m);

struct CacheOutcome {
    bool wrote = false;
    long rows = 0;
    std::filesystem::path cache;
    std::filesystem::path manifest;
};
// Embeds every manifest image once. A complete cache is left untouched.
CacheOutcome cmd_cache_embeddings(const Context& ctx);

enum class Which { kAux, kImage };
struct TrainOutcome {
    long steps_done = 0;
    bool finished = false;
    bool resumed = false;
    std::optional<std::filesystem::path> checkpoint;
    std::filesystem::path loss_csv;
    std::vector<train::LossRow> history;
};
// Image runs train the regime of ctx.method. max_steps >= 0 stops early
// after checkpointing (a resumable interruption).
TrainOutcome cmd_train(const Context& ctx, Which which, long max_steps = -1);

struct SampleOutcome {
    pipeline::SampleBatch batch;
    std::filesystem::path grid;
    std::filesystem::path tensor;
    std::filesystem::path manifest;
    int grid_columns = 0;
    int grid_rows = 0;
};
SampleOutcome cmd_sample(const Context& ctx, bool with_timing = true);

struct EvalOutcome {
    std::vector<eval::MetricRow> rows;
    std::filesystem::path csv;
    std::filesystem::path reference_cache;
    std::optional<std::filesystem::path> plot;
};
// One row per stored checkpoint of the method's image run.
EvalOutcome cmd_eval(const Context& ctx, bool plot = false);
// File holding the reference features; depends on data and extractor only.
std::filesystem::path reference_feature_path(const Context& ctx);

struct SweepCsvRow {
    std::string arm;
    int dim = 0;
    long budget = 0;
    double score = 0.0;
    std::uint64_t seed = 0;
    double recon = 0.0;  // NaN for the K-means arm
};
struct SweepOutcome {
    std::vector<SweepCsvRow> rows;
    std::filesystem::path csv;
};
SweepOutcome cmd_sweep_dim(const Context& ctx);
std::vector<SweepCsvRow> read_sweep_csv(const std::filesystem::path& csv);

// Renders a metrics CSV (score vs step per method) or a sweep CSV (score
// vs dimension per arm and budget) as SVG.
void cmd_plot(const std::filesystem::path& csv, const std::filesystem::path& svg);

// Exit status for an error kind; 1 for anything else.
int exit_code(ErrorKind kind);

// Full command-line entry point used by main().
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace vcdm::cli
