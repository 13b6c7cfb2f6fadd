#include "vcdm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <regex>

#include "vcdm/errors.hpp"

namespace vcdm::train {

namespace {

using nlohmann::json;

std::string run_prefix(const TrainOptions& opts) { return opts.run_name + "-" + opts.config_hash + "-step"; }

json parse_meta(const Checkpoint& ckpt) {
    try {
        return json::parse(ckpt.meta_json);
    } catch (const json::exception& e) {
        throw IncompatibleCheckpoint(std::string("unreadable checkpoint metadata: ") + e.what());
    }
}

}  // namespace

std::filesystem::path checkpoint_path(const TrainOptions& opts, long step) {
    char digits[32];
    std::snprintf(digits, sizeof digits, "%08ld", step);
    return opts.checkpoint_dir / (run_prefix(opts) + digits + ".ckpt");
}

std::filesystem::path best_checkpoint_path(const TrainOptions& opts) {
    return opts.checkpoint_dir / (opts.run_name + "-" + opts.config_hash + "-best.ckpt");
}

namespace {

std::vector<std::pair<long, std::filesystem::path>> list_checkpoints(const TrainOptions& opts) {
    std::vector<std::pair<long, std::filesystem::path>> found;
    if (opts.checkpoint_dir.empty() || !std::filesystem::is_directory(opts.checkpoint_dir)) return found;
    const std::string prefix = run_prefix(opts);
    for (const auto& entry : std::filesystem::directory_iterator(opts.checkpoint_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind(prefix, 0) != 0 || entry.path().extension() != ".ckpt") continue;
        const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - 5);
        if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) continue;
        found.emplace_back(std::stol(digits), entry.path());
    }
    std::sort(found.begin(), found.end());
    return found;
}

// Checkpoints of the same run name but any config hash, used to refuse
// resuming under a changed configuration.
bool foreign_checkpoint_exists(const TrainOptions& opts) {
    if (opts.checkpoint_dir.empty() || !std::filesystem::is_directory(opts.checkpoint_dir)) return false;
    const std::regex pattern(opts.run_name + "-([0-9a-f]+)-step[0-9]+\\.ckpt");
    for (const auto& entry : std::filesystem::directory_iterator(opts.checkpoint_dir)) {
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern) && m[1].str() != opts.config_hash) return true;
    }
    return false;
}

}  // namespace

std::optional<std::filesystem::path> latest_checkpoint(const TrainOptions& opts) {
    auto all = list_checkpoints(opts);
    if (all.empty()) return std::nullopt;
    return all.back().second;
}

std::string checkpoint_config_hash(const Checkpoint& ckpt) {
    const json meta = parse_meta(ckpt);
    if (!meta.contains("train")) throw IncompatibleCheckpoint("checkpoint carries no training metadata");
    return meta["train"].value("config_hash", "");
}

long checkpoint_step(const Checkpoint& ckpt) {
    const json meta = parse_meta(ckpt);
    if (!meta.contains("train")) throw IncompatibleCheckpoint("checkpoint carries no training metadata");
    return meta["train"].value("step", 0L);
}

std::vector<LossRow> checkpoint_history(const Checkpoint& ckpt) {
    std::vector<LossRow> rows;
    if (!ckpt.has("train/loss")) return rows;
    const auto& steps = ckpt.get("train/step").values;
    const auto& loss = ckpt.get("train/loss").values;
    const auto& sigma = ckpt.get("train/sigma").values;
    for (std::size_t i = 0; i < loss.size(); ++i) rows.push_back({static_cast<long>(steps[i]), loss[i], sigma[i]});
    return rows;
}

void load_parameters(const Checkpoint& ckpt, nn::ParameterSet& params, bool use_ema) {
    const std::string prefix = use_ema ? "ema/" : "param/";
    std::vector<std::vector<double>> values(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string key = prefix + params.name(i);
        if (!ckpt.has(key)) throw IncompatibleCheckpoint("checkpoint lacks parameter " + params.name(i));
        values[i] = ckpt.get(key).values;
    }
    params.assign(values);
}

Trainer::Trainer(nn::ParameterSet& params, TrainOptions opts, Rng rng)
    : params_(params),
      opts_(std::move(opts)),
      rng_(std::move(rng)),
      adam_(params, opts_.adam),
      ema_(params, opts_.ema_decay, opts_.ema_warmup),
      best_score_(std::numeric_limits<double>::infinity()) {
    if (opts_.steps < 0 || opts_.batch_size < 1) throw InvalidArgument("TrainOptions: steps >= 0 and batch_size >= 1");
    if (opts_.checkpoint_every < 1 || opts_.keep_last < 1) {
        throw InvalidArgument("TrainOptions: checkpoint cadence and retention must be positive");
    }
}

Checkpoint Trainer::snapshot(long step, const std::vector<LossRow>& history, const MetaWriter& meta) const {
    Checkpoint ck;
    if (meta) meta(ck);
    json m = parse_meta(ck);
    m["train"] = {{"step", step},
                  {"adam_steps", adam_.steps_taken()},
                  {"ema_updates", ema_.updates()},
                  {"ema_decay", ema_.decay()},
                  {"rng", rng_.save_state()},
                  {"config_hash", opts_.config_hash},
                  {"run_name", opts_.run_name},
                  {"best_score", std::isfinite(best_score_) ? json(best_score_) : json(nullptr)}};
    ck.meta_json = m.dump();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& p = params_.at(i);
        const auto& name = params_.name(i);
        ck.put("param/" + name, p.shape(), {p.value().begin(), p.value().end()});
        ck.put("ema/" + name, p.shape(), ema_.values()[i]);
        ck.put("adam_m/" + name, p.shape(), adam_.first_moment()[i]);
        ck.put("adam_v/" + name, p.shape(), adam_.second_moment()[i]);
    }
    std::vector<double> steps, loss, sigma;
    for (const auto& r : history) {
        steps.push_back(static_cast<double>(r.step));
        loss.push_back(r.loss);
        sigma.push_back(r.mean_sigma);
    }
    ck.put("train/step", steps);
    ck.put("train/loss", loss);
    ck.put("train/sigma", sigma);
    return ck;
}

bool Trainer::restore(TrainResult& result) {
    const auto latest = latest_checkpoint(opts_);
    if (!latest) {
        if (foreign_checkpoint_exists(opts_)) {
            throw ConfigError("checkpoints for run '" + opts_.run_name +
                              "' exist under a different config hash; refusing to resume");
        }
        return false;
    }
    const Checkpoint ck = Checkpoint::load(*latest);
    if (checkpoint_config_hash(ck) != opts_.config_hash) {
        throw ConfigError("checkpoint " + latest->string() + " was written under a different config hash");
    }
    const json m = parse_meta(ck)["train"];
    load_parameters(ck, params_, false);
    std::vector<std::vector<double>> ema(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ema[i] = ck.get("ema/" + params_.name(i)).values;
        adam_.first_moment()[i] = ck.get("adam_m/" + params_.name(i)).values;
        adam_.second_moment()[i] = ck.get("adam_v/" + params_.name(i)).values;
    }
    ema_.set_values(std::move(ema));
    ema_.set_updates(m.at("ema_updates").get<long>());
    adam_.set_steps_taken(m.at("adam_steps").get<long>());
    rng_.load_state(m.at("rng").get<std::string>());
    if (!m.at("best_score").is_null()) best_score_ = m.at("best_score").get<double>();
    result.history = checkpoint_history(ck);
    result.steps_done = m.at("step").get<long>();
    result.last_checkpoint = *latest;
    return true;
}

std::filesystem::path Trainer::write(long step, const std::vector<LossRow>& history, const MetaWriter& meta) {
    std::filesystem::create_directories(opts_.checkpoint_dir);
    const auto path = checkpoint_path(opts_, step);
    snapshot(step, history, meta).save(path);
    prune();
    return path;
}

void Trainer::prune() {
    auto all = list_checkpoints(opts_);
    const std::size_t keep = static_cast<std::size_t>(opts_.keep_last);
    if (all.size() <= keep) return;
    for (std::size_t i = 0; i + keep < all.size(); ++i) std::filesystem::remove(all[i].second);
}

TrainResult Trainer::run(const LossFn& loss_fn, const MetaWriter& meta, const EvalFn& eval) {
    TrainResult result;
    const bool checkpointing = !opts_.checkpoint_dir.empty();
    if (checkpointing && opts_.resume) result.resumed = restore(result);

    const long limit = opts_.stop_after >= 0 ? std::min(opts_.stop_after, opts_.steps) : opts_.steps;
    long step = result.steps_done;
    for (; step < limit; ++step) {
        params_.zero_grad();
        StepLoss s;
        try {
            s = loss_fn(rng_, step);
        } catch (const NumericFailure& e) {
            throw NumericFailure(e.what(), e.sigma(), step);
        }
        double mean_sigma = 0.0;
        for (double v : s.sigmas) mean_sigma += v;
        if (!s.sigmas.empty()) mean_sigma /= static_cast<double>(s.sigmas.size());
        const double value = s.loss.item();
        if (!std::isfinite(value)) {
            const double worst = s.sigmas.empty() ? -1.0 : *std::max_element(s.sigmas.begin(), s.sigmas.end());
            throw NumericFailure("non-finite training loss", worst, step);
        }
        s.loss.backward();
        adam_.step(params_);
        ema_.update(params_);
        result.history.push_back({step, value, mean_sigma});

        const long done = step + 1;
        if (checkpointing && (done % opts_.checkpoint_every == 0 || done == limit)) {
            if (eval) {
                const double score = eval();
                if (score < best_score_) {
                    best_score_ = score;
                    snapshot(done, result.history, meta).save(best_checkpoint_path(opts_));
                    result.best_checkpoint = best_checkpoint_path(opts_);
                }
            }
            result.last_checkpoint = write(done, result.history, meta);
        }
    }
    // A run with nothing left to do (for instance zero steps) still leaves a
    // loadable checkpoint behind.
    if (checkpointing && !result.last_checkpoint) result.last_checkpoint = write(step, result.history, meta);
    result.steps_done = step;
    result.ema_values = ema_.values();
    result.finished = step >= opts_.steps;
    return result;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "step,loss,mean_sigma\n";
    for (const auto& r : rows) out << r.step << ',' << r.loss << ',' << r.mean_sigma << '\n';
}

}  // namespace vcdm::train
