#include "vcdm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>

#include "vcdm/errors.hpp"

namespace vcdm::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<Rng> stage_rngs(std::uint64_t seed, int begin, int end, int stage) {
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i) rngs.emplace_back(item_seed(seed, static_cast<std::uint64_t>(i), stage));
    return rngs;
}

void require_regime(const image_model::ImageModel& model, image_model::Regime regime, const std::string& name,
                    Method method) {
    if (model.config().regime != regime)
        throw ConfigError(std::string(to_string(method)) + " needs a stage-2 model in the " +
                          image_model::to_string(regime) + " regime, but " + name + " was trained in the " +
                          image_model::to_string(model.config().regime) + " regime");
}

}  // namespace

std::uint64_t item_seed(std::uint64_t plan_seed, std::uint64_t item, int stage) {
    return derive_seed(derive_seed(plan_seed, item), static_cast<std::uint64_t>(stage));
}

const char* to_string(Method m) {
    switch (m) {
        case Method::kVcdm: return "vcdm";
        case Method::kEdmDirect: return "edm";
        case Method::kClassCond: return "class-cond";
        case Method::kVcdmOracle: return "oracle";
    }
    return "unknown";
}

Method method_from_string(const std::string& s) {
    if (s == "vcdm") return Method::kVcdm;
    if (s == "edm" || s == "edm_direct") return Method::kEdmDirect;
    if (s == "class-cond" || s == "class_cond") return Method::kClassCond;
    if (s == "oracle" || s == "vcdm_oracle") return Method::kVcdmOracle;
    throw ConfigError("unknown method '" + s + "' (expected vcdm, edm, class-cond or oracle)");
}

void SamplingPlan::validate() const {
    if (count < 1) throw InvalidArgument("plan count must be >= 1");
    if (chunk_size < 1) throw InvalidArgument("plan chunk_size must be >= 1");
    stage1_sampler.validate();
    stage1_schedule.validate();
    stage2_sampler.validate();
    stage2_schedule.validate();
}

EmbeddingSource aux_source(const aux::AuxModel& model, const diffusion::SamplerConfig& sampler,
                           const diffusion::ScheduleConfig& schedule) {
    return [&model, sampler, schedule](std::span<const int> classes, std::span<Rng> rngs) {
        return aux::sample_embedding(model, classes, sampler, schedule, rngs);
    };
}

EmbeddingSource point_mass_source(std::vector<double> y) {
    return [y = std::move(y)](std::span<const int> classes, std::span<Rng>) {
        Matrix out(static_cast<Eigen::Index>(classes.size()), static_cast<Eigen::Index>(y.size()));
        for (Eigen::Index i = 0; i < out.rows(); ++i)
            for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = y[static_cast<std::size_t>(j)];
        return out;
    };
}

Matrix sample_images(const SamplingPlan& plan, const image_model::ImageModel& model, const Matrix& y) {
    plan.validate();
    const auto& cfg = model.config();
    const bool conditional = cfg.regime != image_model::Regime::kUnconditional;
    if (conditional && (y.rows() != plan.count || y.cols() != cfg.y_dim))
        throw InvalidArgument("sample_images: expected " + std::to_string(plan.count) + " x " +
                              std::to_string(cfg.y_dim) + " conditioning rows");
    if (plan.a.class_id != aux::kNullClass && cfg.class_count == 0)
        throw ConfigError("class " + std::to_string(plan.a.class_id) + " requested from a model without classes");

    const int item = cfg.item_size();
    Matrix x(plan.count, item);
    for (int begin = 0; begin < plan.count; begin += plan.chunk_size) {
        const int end = std::min(plan.count, begin + plan.chunk_size);
        const int rows = end - begin;
        std::vector<double> ychunk;
        if (conditional) ychunk.assign(y.row(begin).data(), y.row(begin).data() + static_cast<std::size_t>(rows) * cfg.y_dim);
        std::vector<int> classes;
        if (cfg.class_count > 0) classes.assign(static_cast<std::size_t>(rows), plan.a.class_id);
        auto rngs = stage_rngs(plan.seed, begin, end, 1);
        nn::Shape shape = cfg.item_shape();
        shape.insert(shape.begin(), rows);
        const auto out = diffusion::sample(model.denoiser(std::move(ychunk), std::move(classes)), shape,
                                           plan.stage2_sampler, plan.stage2_schedule, rngs);
        x.middleRows(begin, rows) = Eigen::Map<const Matrix>(out.data(), rows, item);
    }
    return x;
}

SampleBatch vcdm_sample(const SamplingPlan& plan, const EmbeddingSource& stage1, int stage1_dim,
                        const std::string& stage1_name, const Stage2& stage2) {
    plan.validate();
    if (!stage2.model) throw NotReady("vcdm_sample: no stage-2 model loaded");
    const auto& cfg = stage2.model->config();
    if (cfg.regime != image_model::Regime::kEmbedding || cfg.y_dim != stage1_dim)
        throw ConfigError("stage-1 model " + stage1_name + " produces " + std::to_string(stage1_dim) +
                          "-d embeddings but stage-2 model " + stage2.name + " expects " +
                          (cfg.regime == image_model::Regime::kEmbedding ? std::to_string(cfg.y_dim) + "-d embeddings"
                                                                         : std::string("no embedding")));
    SampleBatch batch;
    batch.item_shape = cfg.item_shape();
    Matrix y(plan.count, stage1_dim);
    auto t0 = Clock::now();
    for (int begin = 0; begin < plan.count; begin += plan.chunk_size) {
        const int end = std::min(plan.count, begin + plan.chunk_size);
        const std::vector<int> classes(static_cast<std::size_t>(end - begin), plan.a.class_id);
        auto rngs = stage_rngs(plan.seed, begin, end, 0);
        const Matrix part = stage1(classes, rngs);
        if (part.rows() != end - begin || part.cols() != stage1_dim)
            throw ConfigError("stage-1 model " + stage1_name + " returned the wrong embedding shape");
        y.middleRows(begin, end - begin) = part;
    }
    batch.stage1_ms = ms_since(t0);
    t0 = Clock::now();
    batch.x = sample_images(plan, *stage2.model, y);
    batch.stage2_ms = ms_since(t0);
    // y is discarded here unless explicitly requested for debugging.
    if (plan.keep_embeddings) batch.y = std::move(y);
    return batch;
}

SampleBatch vcdm_sample(const SamplingPlan& plan, const aux::AuxModel& aux, const std::string& aux_name,
                        const Stage2& stage2) {
    return vcdm_sample(plan, aux_source(aux, plan.stage1_sampler, plan.stage1_schedule), aux.config().embed_dim,
                       aux_name, stage2);
}

std::vector<int> matching_rows(const EmbeddingDataset& data, CondInput a) {
    if (!data.classes.empty() && data.classes.size() != static_cast<std::size_t>(data.y.rows()))
        throw InvalidArgument("oracle dataset: class labels do not match the embedding rows");
    std::vector<int> rows;
    for (int i = 0; i < data.y.rows(); ++i) {
        if (a.class_id == aux::kNullClass) rows.push_back(i);
        else if (!data.classes.empty() && data.classes[static_cast<std::size_t>(i)] == a.class_id) rows.push_back(i);
    }
    if (rows.empty())
        throw InvalidArgument("oracle dataset has no rows for class " + std::to_string(a.class_id));
    return rows;
}

std::vector<int> oracle_rows(const EmbeddingDataset& data, CondInput a, int count, std::uint64_t seed) {
    std::vector<int> pool = matching_rows(data, a);
    Rng rng(derive_seed(seed, ~std::uint64_t{0}));
    std::vector<int> out(static_cast<std::size_t>(count));
    const std::size_t n = pool.size();
    if (static_cast<std::size_t>(count) <= n) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::swap(pool[i], pool[i + rng.below(n - i)]);
            out[i] = pool[i];
        }
    } else {
        for (auto& r : out) r = pool[rng.below(n)];
    }
    return out;
}

SampleBatch oracle_sample(const SamplingPlan& plan, const EmbeddingDataset& data, const Stage2& stage2) {
    plan.validate();
    if (!stage2.model) throw NotReady("oracle_sample: no stage-2 model loaded");
    require_regime(*stage2.model, image_model::Regime::kEmbedding, stage2.name, Method::kVcdmOracle);
    if (data.y.cols() != stage2.model->config().y_dim)
        throw ConfigError("oracle dataset has " + std::to_string(data.y.cols()) + "-d embeddings but " + stage2.name +
                          " expects " + std::to_string(stage2.model->config().y_dim));
    const auto t0 = Clock::now();
    const auto rows = oracle_rows(data, plan.a, plan.count, plan.seed);
    Matrix y(plan.count, data.y.cols());
    for (int i = 0; i < plan.count; ++i) y.row(i) = data.y.row(rows[static_cast<std::size_t>(i)]);
    SampleBatch batch;
    batch.item_shape = stage2.model->config().item_shape();
    batch.stage1_ms = ms_since(t0);
    const auto t1 = Clock::now();
    batch.x = sample_images(plan, *stage2.model, y);
    batch.stage2_ms = ms_since(t1);
    if (plan.keep_embeddings) batch.y = std::move(y);
    return batch;
}

SampleBatch class_cond_sample(const SamplingPlan& plan, const embedding::KMeansCodebook& codebook,
                              std::span<const double> distribution, const Stage2& stage2) {
    plan.validate();
    if (!stage2.model) throw NotReady("class_cond_sample: no stage-2 model loaded");
    require_regime(*stage2.model, image_model::Regime::kCluster, stage2.name, Method::kClassCond);
    const int k = codebook.size();
    if (static_cast<int>(distribution.size()) != k)
        throw InvalidArgument("cluster distribution has " + std::to_string(distribution.size()) +
                              " entries but the codebook has " + std::to_string(k));
    if (stage2.model->config().y_dim != k)
        throw InvalidArgument(stage2.name + " was trained on " + std::to_string(stage2.model->config().y_dim) +
                              " clusters but the codebook has " + std::to_string(k));
    std::vector<double> cdf(distribution.begin(), distribution.end());
    std::partial_sum(cdf.begin(), cdf.end(), cdf.begin());
    if (!(cdf.back() > 0.0)) throw InvalidArgument("cluster distribution has no mass");

    const auto t0 = Clock::now();
    SampleBatch batch;
    batch.item_shape = stage2.model->config().item_shape();
    Matrix y = Matrix::Zero(plan.count, k);
    batch.cluster_ids.resize(static_cast<std::size_t>(plan.count));
    for (int i = 0; i < plan.count; ++i) {
        Rng rng(item_seed(plan.seed, static_cast<std::uint64_t>(i), 0));
        const double u = rng.uniform() * cdf.back();
        const int id = std::min<int>(k - 1, static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()));
        batch.cluster_ids[static_cast<std::size_t>(i)] = id;
        y(i, id) = 1.0;
    }
    batch.stage1_ms = ms_since(t0);
    const auto t1 = Clock::now();
    batch.x = sample_images(plan, *stage2.model, y);
    batch.stage2_ms = ms_since(t1);
    if (plan.keep_embeddings) batch.y = std::move(y);
    return batch;
}

SampleBatch edm_direct(const SamplingPlan& plan, const Stage2& stage2) {
    plan.validate();
    if (!stage2.model) throw NotReady("edm_direct: no model loaded");
    require_regime(*stage2.model, image_model::Regime::kUnconditional, stage2.name, Method::kEdmDirect);
    SampleBatch batch;
    batch.item_shape = stage2.model->config().item_shape();
    const auto t0 = Clock::now();
    batch.x = sample_images(plan, *stage2.model, Matrix());
    batch.stage2_ms = ms_since(t0);
    return batch;
}

TimingReport timing_report(const SamplingPlan& plan, const aux::AuxModel& aux, const image_model::ImageModel& image) {
    plan.validate();
    std::vector<double> s1, s2;
    for (int i = 0; i < plan.count; ++i) {
        SamplingPlan one = plan;
        one.count = 1;
        one.seed = derive_seed(plan.seed, static_cast<std::uint64_t>(i));
        const SampleBatch b = vcdm_sample(one, aux, "aux", Stage2{&image, "image"});
        s1.push_back(b.stage1_ms);
        s2.push_back(b.stage2_ms);
    }
    TimingReport t;
    t.items = plan.count;
    t.stage1_ms = median(s1);
    t.stage2_ms = median(s2);
    const double total = t.stage1_ms + t.stage2_ms;
    t.overhead_fraction = total > 0.0 ? t.stage1_ms / total : 0.0;
    return t;
}

std::string format_timing(const TimingReport& t) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "stage 1: %.2f ms/item, stage 2: %.2f ms/item, overhead %.1f%% (median of %d)",
                  t.stage1_ms, t.stage2_ms, 100.0 * t.overhead_fraction, t.items);
    return buf;
}

}  // namespace vcdm::pipeline
