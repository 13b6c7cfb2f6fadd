#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vcdm/checkpoint.hpp"
#include "vcdm/nn/optim.hpp"
#include "vcdm/random.hpp"

namespace vcdm::train {

struct TrainOptions {
    long steps = 2000;
    int batch_size = 64;
    nn::AdamConfig adam{};
    double ema_decay = 0.9999;
    bool ema_warmup = true;

    // Checkpointing is disabled when checkpoint_dir is empty.
    std::filesystem::path checkpoint_dir;
    std::string run_name = "run";
    std::string config_hash = "nohash";
    long checkpoint_every = 500;
    int keep_last = 3;
    bool resume = true;
    // Stop (after checkpointing) once this many total steps are done; used
    // to emulate an interrupted job. Negative means run to `steps`.
    long stop_after = -1;
};

struct LossRow {
    long step = 0;
    double loss = 0.0;
    double mean_sigma = 0.0;
};

struct StepLoss {
    nn::Var loss;
    std::vector<double> sigmas;
};

// Builds the scalar objective for one optimisation step. All randomness
// (batch indices, noise levels, noise) must come from the generator passed in.
using LossFn = std::function<StepLoss(Rng& rng, long step)>;
// Adds model description (config, statistics) to a checkpoint being written.
using MetaWriter = std::function<void(Checkpoint& ckpt)>;
// Optional score for best-by-eval retention; lower is better.
using EvalFn = std::function<double()>;

struct TrainResult {
    std::vector<LossRow> history;
    long steps_done = 0;
    bool resumed = false;
    bool finished = false;
    std::optional<std::filesystem::path> last_checkpoint;
    std::optional<std::filesystem::path> best_checkpoint;
    // EMA weights at the end of the run, in parameter order.
    std::vector<std::vector<double>> ema_values;
};

// Checkpoint file for a run at a given step:
//   <dir>/<run_name>-<config_hash>-step<NNNNNNNN>.ckpt
std::filesystem::path checkpoint_path(const TrainOptions& opts, long step);
std::filesystem::path best_checkpoint_path(const TrainOptions& opts);
// Highest-step checkpoint for this run, if any.
std::optional<std::filesystem::path> latest_checkpoint(const TrainOptions& opts);

// Reads the training meta fields common to every run checkpoint.
std::string checkpoint_config_hash(const Checkpoint& ckpt);
long checkpoint_step(const Checkpoint& ckpt);
std::vector<LossRow> checkpoint_history(const Checkpoint& ckpt);

// Loads the parameter values stored under "ema/" (default) or "param/".
void load_parameters(const Checkpoint& ckpt, nn::ParameterSet& params, bool use_ema = true);

// Adam + EMA loop with periodic checkpoints. When resuming, optimiser
// moments, EMA, generator state and the loss history are restored so the
// continuation is bitwise identical to an uninterrupted run. A checkpoint
// whose config hash differs from opts.config_hash is refused.
class Trainer {
public:
    Trainer(nn::ParameterSet& params, TrainOptions opts, Rng rng);

    TrainResult run(const LossFn& loss_fn, const MetaWriter& meta = {}, const EvalFn& eval = {});

    const nn::Ema& ema() const { return ema_; }
    const Rng& rng() const { return rng_; }
    const TrainOptions& options() const { return opts_; }

    // Snapshot of the full training state.
    Checkpoint snapshot(long step, const std::vector<LossRow>& history, const MetaWriter& meta) const;

private:
    bool restore(TrainResult& result);
    std::filesystem::path write(long step, const std::vector<LossRow>& history, const MetaWriter& meta);
    void prune();

    nn::ParameterSet& params_;
    TrainOptions opts_;
    Rng rng_;
    nn::Adam adam_;
    nn::Ema ema_;
    double best_score_;
};

// Writes "step,loss,mean_sigma" rows.
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows);

}  // namespace vcdm::train
