#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "commands.hpp"
#include "config.hpp"
#include "vcdm/embedding.hpp"
#include "vcdm/errors.hpp"
#include "vcdm/image.hpp"
#include "vcdm/image_model.hpp"
#include "vcdm/toy.hpp"
#include "vcdm/training.hpp"

namespace fs = std::filesystem;
using namespace vcdm;
using namespace vcdm::cli;

namespace {

fs::path scratch_dir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    fs::path dir = fs::temp_directory_path() /
                   ("vcdm_cli_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" +
                    std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig tiny_ring(const fs::path& out) {
    ExperimentConfig c;
    const std::vector<std::pair<std::string, std::string>> kv = {
        {"out_dir", out.string()},   {"ring.n_train", "400"},        {"ring.n_reference", "800"},
        {"aux.token_dim", "16"},     {"aux.layers", "1"},            {"aux.heads", "2"},
        {"aux.sigma_features", "8"}, {"aux.steps", "20"},            {"aux.batch", "16"},
        {"aux.lr", "2e-3"},          {"image.arch", "mlp"},          {"image.mlp_width", "16"},
        {"image.mlp_blocks", "1"},   {"image.sigma_features", "8"},  {"image.steps", "20"},
        {"image.batch", "16"},       {"image.lr", "2e-3"},           {"train.checkpoint_every", "10"},
        {"stage1.steps", "6"},       {"stage2.steps", "6"},          {"eval.n", "100"},
        {"sample.count", "9"},
    };
    for (const auto& [k, v] : kv) c.set(k, v);
    return c;
}

ExperimentConfig tiny_images(const fs::path& dir) {
    toy::write_disc_dataset(dir / "data", 24, 8, 2, 7);
    ExperimentConfig c;
    const std::vector<std::pair<std::string, std::string>> kv = {
        {"out_dir", (dir / "runs").string()},
        {"dataset.kind", "manifest"},
        {"dataset.manifest", (dir / "data" / "manifest.jsonl").string()},
        {"embedder.proxy_dim", "8"},
        {"image.base_width", "8"},
        {"image.channel_mults", "1,2"},
        {"image.sigma_features", "8"},
        {"image.steps", "4"},
        {"image.batch", "4"},
        {"stage2.steps", "3"},
        {"eval.n", "6"},
        {"eval.shrinkage", "0.1"},
    };
    for (const auto& [k, v] : kv) c.set(k, v);
    return c;
}

Context context(const ExperimentConfig& cfg, pipeline::Method m = pipeline::Method::kVcdm) {
    Context ctx = Context::from_config(cfg);
    ctx.method = m;
    return ctx;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "vcdm");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

void write_config(const fs::path& path, const ExperimentConfig& cfg) { std::ofstream(path) << cfg.canonical(); }

}  // namespace

// ---------------------------------------------------------------- config

TEST(Config, EmptyTextGivesDefaults) {
    const auto c = ExperimentConfig::parse("# nothing\n\n");
    EXPECT_EQ(c.canonical(), ExperimentConfig{}.canonical());
    EXPECT_EQ(c.get_int("train.checkpoint_every"), 500);
    EXPECT_EQ(c.get_int("train.keep_last"), 3);
}

TEST(Config, RejectsUnknownKeysDuplicatesAndBadValues) {
    auto expect_config_error = [](const std::string& text, const std::string& needle) {
        try {
            ExperimentConfig::parse(text, "cfg");
            FAIL() << "accepted: " << text;
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_config_error("image.stepz = 3\n", "cfg:1");
    expect_config_error("seed = 1\nseed = 2\n", "duplicate");
    expect_config_error("\nimage.steps = ten\n", "cfg:2");
    expect_config_error("image.lr = nan\n", "finite");
    expect_config_error("dataset.kind = cifar\n", "one of");
    expect_config_error("augment.enabled = maybe\n", "true or false");
    expect_config_error("sweep.grid = 1,x\n", "integer list");
    expect_config_error("no equals sign\n", "key = value");
}

TEST(Config, EquivalentSpellingsHashEqually) {
    const auto a = ExperimentConfig::parse("image.lr = 1e-4\naugment.enabled = yes\nsweep.grid = 1, 2 ,4\n");
    const auto b = ExperimentConfig::parse("image.lr=0.0001\naugment.enabled=true\nsweep.grid=1,2,4\n");
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(ExperimentConfig::parse(a.canonical()).canonical(), a.canonical());
}

TEST(Config, PerCommandKeysStayOutOfTheHash) {
    ExperimentConfig a, b;
    b.set("seed", "9");
    b.set("method", "edm");
    b.set("out_dir", "/elsewhere");
    b.set("sample.count", "100");
    EXPECT_EQ(a.hash(), b.hash());
    b.set("stage2.steps", "18");
    EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, NoOutputPathCollisionsOverTenThousandConfigs) {
    Rng rng(11);
    std::set<std::string> canon, hashes, paths;
    const std::vector<std::string> int_keys = {"image.steps", "aux.steps", "image.batch", "ring.n_train",
                                               "stage1.steps", "stage2.steps", "cluster.k", "eval.n"};
    const std::vector<std::string> real_keys = {"image.lr", "aux.lr", "ring.spread", "stage2.churn"};
    while (canon.size() < 10000) {
        ExperimentConfig c;
        for (const auto& k : int_keys) c.set(k, std::to_string(1 + rng.below(64)));
        for (const auto& k : real_keys) c.set(k, std::to_string(static_cast<double>(1 + rng.below(50)) * 1e-3));
        if (!canon.insert(c.canonical()).second) continue;
        hashes.insert(c.hash());
        Context ctx = Context::from_config(c);
        paths.insert("vcdm-s0-n16-" + ctx.hash() + ".png");
    }
    EXPECT_EQ(hashes.size(), canon.size());
    EXPECT_EQ(paths.size(), canon.size());
}

// ---------------------------------------------------------------- cache-embeddings

TEST(CacheEmbeddings, ManifestCacheHasOneRowPerImageAndIsIdempotent) {
    const auto dir = scratch_dir();
    const auto ctx = context(tiny_images(dir));
    const auto first = cmd_cache_embeddings(ctx);
    EXPECT_TRUE(first.wrote);
    const auto manifest = data_aug::DatasetManifest::load(dir / "data" / "manifest.jsonl");
    EXPECT_EQ(first.rows, static_cast<long>(manifest.rows.size()));
    EXPECT_EQ(embedding::read_cache_header(first.cache).count, manifest.rows.size());

    const auto stamp = fs::last_write_time(first.cache);
    const auto bytes = slurp(first.cache);
    const auto again = cmd_cache_embeddings(ctx);
    EXPECT_FALSE(again.wrote);
    EXPECT_EQ(fs::last_write_time(first.cache), stamp);
    EXPECT_EQ(slurp(first.cache), bytes);
}

TEST(CacheEmbeddings, CorruptedHeaderFailsWithCacheCorrupt) {
    const auto dir = scratch_dir();
    const auto cfg = tiny_images(dir);
    const auto out = cmd_cache_embeddings(context(cfg));
    {
        std::fstream f(out.cache, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXXXXXX", 8);
    }
    EXPECT_THROW(cmd_cache_embeddings(context(cfg)), CacheCorrupt);
    write_config(dir / "c.cfg", cfg);
    EXPECT_EQ(run({"cache-embeddings", "--config", (dir / "c.cfg").string()}), exit_code(ErrorKind::kCacheCorrupt));
}

// ---------------------------------------------------------------- train

TEST(Train, ResumeEqualsUninterruptedRun) {
    const auto a = scratch_dir() / "a";
    const auto b = a.parent_path() / "b";
    const auto straight = cmd_train(context(tiny_ring(a)), Which::kImage);
    EXPECT_TRUE(straight.finished);

    const auto part = cmd_train(context(tiny_ring(b)), Which::kImage, 10);
    EXPECT_FALSE(part.finished);
    EXPECT_EQ(part.steps_done, 10);
    const auto rest = cmd_train(context(tiny_ring(b)), Which::kImage);
    EXPECT_TRUE(rest.resumed);
    ASSERT_EQ(rest.history.size(), straight.history.size());
    for (std::size_t i = 0; i < rest.history.size(); ++i) EXPECT_EQ(rest.history[i].loss, straight.history[i].loss);
    EXPECT_EQ(slurp(rest.loss_csv), slurp(straight.loss_csv));
}

TEST(Train, RefusesToResumeUnderAChangedConfig) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cmd_train(context(cfg), Which::kImage, 10);
    cfg.set("image.lr", "1e-3");
    EXPECT_THROW(cmd_train(context(cfg), Which::kImage), ConfigError);
}

TEST(Train, FinetuneWithZeroStepsReproducesTheBaseModel) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    const auto base = cmd_train(context(cfg, pipeline::Method::kEdmDirect), Which::kImage);
    ASSERT_TRUE(base.checkpoint);
    cfg.set("finetune.base", base.checkpoint->string());
    cfg.set("image.steps", "0");
    const auto tuned = cmd_train(context(cfg, pipeline::Method::kVcdmOracle), Which::kImage);
    ASSERT_TRUE(tuned.checkpoint);

    // Stage-2 noise streams coincide across methods, so the oracle samples of
    // the finetuned model must equal the base model's direct samples.
    auto edm_cfg = cfg;
    edm_cfg.set("finetune.base", "");
    edm_cfg.set("image.steps", "20");
    const auto direct = cmd_sample(context(edm_cfg, pipeline::Method::kEdmDirect), false);
    const auto oracle = cmd_sample(context(cfg, pipeline::Method::kVcdmOracle), false);
    ASSERT_EQ(direct.batch.x.size(), oracle.batch.x.size());
    for (Eigen::Index i = 0; i < direct.batch.x.size(); ++i)
        EXPECT_EQ(direct.batch.x.data()[i], oracle.batch.x.data()[i]);
}

TEST(Train, NonFiniteLossExitsNonzero) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cfg.set("image.lr", "1e300");
    cfg.set("image.steps", "50");
    write_config(dir / "c.cfg", cfg);
    EXPECT_EQ(run({"train", "--config", (dir / "c.cfg").string(), "--method", "edm"}),
              exit_code(ErrorKind::kNumericFailure));
}

// ---------------------------------------------------------------- sample

TEST(Sample, SameConfigAndSeedGiveIdenticalTensorDumps) {
    const auto dir = scratch_dir();
    const auto cfg = tiny_ring(dir);
    cmd_train(context(cfg), Which::kAux);
    cmd_train(context(cfg), Which::kImage);
    const auto first = cmd_sample(context(cfg), false);
    const std::string bytes = slurp(first.tensor);
    const auto second = cmd_sample(context(cfg), false);
    EXPECT_EQ(first.tensor, second.tensor);
    EXPECT_EQ(slurp(second.tensor), bytes);
    EXPECT_EQ(embedding::read_cache_header(first.tensor).source, embedding::SourceTag::kRawTensor);
    EXPECT_EQ(embedding::read_cache(first.tensor).rows(), 9);
    EXPECT_TRUE(fs::exists(first.grid));
    EXPECT_TRUE(fs::exists(first.manifest));
}

TEST(Sample, GridTilesCeilSqrtColumns) {
    const auto dir = scratch_dir();
    const auto cfg = tiny_images(dir);
    cmd_train(context(cfg, pipeline::Method::kEdmDirect), Which::kImage);
    for (int count : {1, 5, 10}) {
        auto ctx = context(cfg, pipeline::Method::kEdmDirect);
        ctx.count = count;
        const auto r = cmd_sample(ctx, false);
        const int cols = static_cast<int>(std::ceil(std::sqrt(count)));
        const int rows = (count + cols - 1) / cols;
        EXPECT_EQ(r.grid_columns, cols);
        const Image grid = read_png(r.grid);
        EXPECT_EQ(grid.width, cols * 8) << count;
        EXPECT_EQ(grid.height, rows * 8) << count;
    }
}

TEST(Sample, OracleWithoutDatasetReferenceIsAConfigurationError) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cfg.set("dataset.kind", "manifest");
    EXPECT_THROW(cmd_sample(context(cfg, pipeline::Method::kVcdmOracle), false), ConfigError);
    write_config(dir / "c.cfg", cfg);
    EXPECT_EQ(run({"sample", "--config", (dir / "c.cfg").string(), "--method", "oracle"}),
              exit_code(ErrorKind::kConfiguration));
}

TEST(Sample, MissingCheckpointIsNotReady) {
    const auto dir = scratch_dir();
    const auto cfg = tiny_ring(dir);
    for (auto m : {pipeline::Method::kVcdm, pipeline::Method::kEdmDirect, pipeline::Method::kClassCond})
        EXPECT_THROW(cmd_sample(context(cfg, m), false), NotReady);
    // An image model alone is not enough for the two-stage sampler.
    cmd_train(context(cfg), Which::kImage);
    EXPECT_THROW(cmd_sample(context(cfg), false), NotReady);
    write_config(dir / "c.cfg", cfg);
    EXPECT_EQ(run({"sample", "--config", (dir / "c.cfg").string(), "--method", "vcdm"}),
              exit_code(ErrorKind::kNotReady));
}

// ---------------------------------------------------------------- eval

TEST(Eval, OneRowPerCheckpointAndASharedReferenceCache) {
    const auto dir = scratch_dir();
    const auto cfg = tiny_ring(dir);
    cmd_train(context(cfg, pipeline::Method::kEdmDirect), Which::kImage);
    cmd_train(context(cfg, pipeline::Method::kClassCond), Which::kImage);

    const auto edm = cmd_eval(context(cfg, pipeline::Method::kEdmDirect), true);
    const auto cc = cmd_eval(context(cfg, pipeline::Method::kClassCond));
    EXPECT_EQ(edm.reference_cache, cc.reference_cache);
    EXPECT_EQ(reference_feature_path(context(cfg, pipeline::Method::kVcdm)), edm.reference_cache);

    ASSERT_EQ(edm.rows.size(), 2u);  // checkpoints at steps 10 and 20
    EXPECT_EQ(edm.rows[0].step, 10);
    EXPECT_EQ(edm.rows[1].step, 20);
    EXPECT_EQ(cc.rows.size(), 2u);
    EXPECT_EQ(eval::read_metric_rows(edm.csv).size(), 4u);
    ASSERT_TRUE(edm.plot);
    EXPECT_NE(slurp(*edm.plot).find("<polyline"), std::string::npos);
}

// ---------------------------------------------------------------- sweep-dim

TEST(SweepDim, GridOfOneGivesOneRowPerBudget) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cfg.set("sweep.grid", "3");
    cfg.set("sweep.budgets", "5,10,15");
    const auto r = cmd_sweep_dim(context(cfg));
    EXPECT_EQ(r.rows.size(), 3u);
    EXPECT_EQ(read_sweep_csv(r.csv).size(), 3u);
}

TEST(SweepDim, PcaReconstructionErrorIsMonotone) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cfg.set("sweep.grid", "1,2,4,8,10");
    cfg.set("sweep.budgets", "2");
    const auto rows = read_sweep_csv(cmd_sweep_dim(context(cfg)).csv);
    ASSERT_EQ(rows.size(), 5u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i].recon, rows[i - 1].recon + 1e-12);
    EXPECT_NEAR(rows.back().recon, 0.0, 1e-10);  // k = d
}

TEST(SweepDim, KMeansArmLeavesReconstructionEmpty) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cfg.set("sweep.arm", "kmeans");
    cfg.set("sweep.grid", "2,8");
    cfg.set("sweep.budgets", "2");
    const auto rows = read_sweep_csv(cmd_sweep_dim(context(cfg)).csv);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_TRUE(std::isnan(rows[0].recon));
    EXPECT_EQ(rows[1].dim, 8);
}

TEST(SweepDim, GridEntryAboveEmbeddingDimIsInvalid) {
    const auto dir = scratch_dir();
    auto cfg = tiny_ring(dir);
    cfg.set("sweep.grid", "11");  // ring embeddings have modes + 2 = 10 dims
    EXPECT_THROW(cmd_sweep_dim(context(cfg)), InvalidArgument);
    write_config(dir / "c.cfg", cfg);
    EXPECT_EQ(run({"sweep-dim", "--config", (dir / "c.cfg").string()}), exit_code(ErrorKind::kInvalidArgument));
}

// ---------------------------------------------------------------- plot and exit codes

TEST(Plot, RejectsUnknownCsv) {
    const auto dir = scratch_dir();
    std::ofstream(dir / "x.csv") << "a,b\n1,2\n";
    EXPECT_THROW(cmd_plot(dir / "x.csv", dir / "x.svg"), ConfigError);
}

TEST(ExitCodes, DistinctAndNonzeroPerErrorKind) {
    std::set<int> codes;
    for (auto k : {ErrorKind::kInvalidArgument, ErrorKind::kNumericFailure, ErrorKind::kBackendUnavailable,
                   ErrorKind::kNotReady, ErrorKind::kConfiguration, ErrorKind::kCacheCorrupt,
                   ErrorKind::kIncompatibleCheckpoint, ErrorKind::kDegenerateCodebook, ErrorKind::kIo}) {
        const int c = exit_code(k);
        EXPECT_GT(c, 2);
        codes.insert(c);
    }
    EXPECT_EQ(codes.size(), 9u);
    EXPECT_EQ(run({"frobnicate"}), 2);
    EXPECT_EQ(run({"sample", "--method", "bogus"}), 2);
}

TEST(ExitCodes, UnavailableClipBackendSurfacesVerbatim) {
    const auto dir = scratch_dir();
    auto cfg = tiny_images(dir);
    cfg.set("embedder.backend", "clip_vit_b32");
    ::unsetenv("VCDM_CLIP_WEIGHTS");
    EXPECT_THROW(cmd_cache_embeddings(context(cfg)), BackendUnavailable);
}
