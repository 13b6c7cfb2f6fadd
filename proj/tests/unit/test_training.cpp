#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "vcdm/aux_model.hpp"
#include "vcdm/errors.hpp"
#include "vcdm/training.hpp"

using namespace vcdm;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("vcdm_" + name)) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

aux::AuxModelConfig tiny() {
    aux::AuxModelConfig c;
    c.embed_dim = 4;
    c.token_dim = 8;
    c.num_layers = 1;
    c.num_heads = 2;
    c.sigma_features = 8;
    return c;
}

aux::AuxTrainData data() {
    Rng rng(5);
    aux::AuxTrainData d;
    d.embeddings.resize(16, 4);
    for (Eigen::Index i = 0; i < d.embeddings.size(); ++i) d.embeddings.data()[i] = rng.normal();
    return d;
}

aux::AuxTrainSettings settings(const std::filesystem::path& dir, long steps) {
    aux::AuxTrainSettings s;
    s.options.steps = steps;
    s.options.batch_size = 8;
    s.options.adam.lr = 1e-3;
    s.options.checkpoint_dir = dir;
    s.options.checkpoint_every = 10;
    s.options.run_name = "aux";
    s.options.config_hash = "abc123";
    return s;
}

}  // namespace

TEST(Trainer, ResumedRunEqualsUninterruptedRun) {
    TempDir full_dir("train_full"), split_dir("train_split");
    Rng init_a(1);
    aux::AuxModel full(tiny(), init_a);
    const auto full_result = aux::train_aux(full, data(), settings(full_dir.path, 45), Rng(2));
    ASSERT_TRUE(full_result.finished);

    Rng init_b(1);
    aux::AuxModel first(tiny(), init_b);
    auto s = settings(split_dir.path, 45);
    s.options.stop_after = 23;
    const auto partial = aux::train_aux(first, data(), s, Rng(2));
    EXPECT_FALSE(partial.finished);
    EXPECT_EQ(partial.steps_done, 23);

    // Fresh process state: a new model object and generator seed that must be
    // overwritten by the checkpoint.
    Rng init_c(99);
    aux::AuxModel second(tiny(), init_c);
    const auto resumed = aux::train_aux(second, data(), settings(split_dir.path, 45), Rng(12345));
    EXPECT_TRUE(resumed.resumed);
    ASSERT_EQ(resumed.history.size(), full_result.history.size());
    for (std::size_t i = 0; i < resumed.history.size(); ++i) {
        EXPECT_EQ(resumed.history[i].loss, full_result.history[i].loss) << "step " << i;
    }
    EXPECT_EQ(second.params().values(), full.params().values());
}

TEST(Trainer, KeepsOnlyTheLastCheckpoints) {
    TempDir dir("train_keep");
    Rng init(1);
    aux::AuxModel model(tiny(), init);
    auto s = settings(dir.path, 60);
    s.options.keep_last = 3;
    aux::train_aux(model, data(), s, Rng(2));
    int count = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path)) {
        (void)e;
        ++count;
    }
    EXPECT_EQ(count, 3);
    EXPECT_TRUE(std::filesystem::exists(train::checkpoint_path(s.options, 60)));
    EXPECT_TRUE(std::filesystem::exists(train::checkpoint_path(s.options, 40)));
    EXPECT_FALSE(std::filesystem::exists(train::checkpoint_path(s.options, 30)));
}

TEST(Trainer, RefusesToResumeUnderDifferentConfigHash) {
    TempDir dir("train_hash");
    Rng init(1);
    aux::AuxModel model(tiny(), init);
    aux::train_aux(model, data(), settings(dir.path, 20), Rng(2));
    auto other = settings(dir.path, 20);
    other.options.config_hash = "def456";
    Rng init2(1);
    aux::AuxModel model2(tiny(), init2);
    EXPECT_THROW(aux::train_aux(model2, data(), other, Rng(2)), ConfigError);
}

TEST(Trainer, CheckpointRestoresSamplingModel) {
    TempDir dir("train_load");
    Rng init(1);
    aux::AuxModel model(tiny(), init);
    auto s = settings(dir.path, 20);
    aux::train_aux(model, data(), s, Rng(2));
    const auto path = train::latest_checkpoint(s.options);
    ASSERT_TRUE(path.has_value());
    const auto ck = Checkpoint::load(*path);
    EXPECT_EQ(train::checkpoint_step(ck), 20);
    EXPECT_EQ(train::checkpoint_config_hash(ck), "abc123");
    EXPECT_EQ(train::checkpoint_history(ck).size(), 20u);
    const auto raw = aux::AuxModel::load(ck, false);
    EXPECT_EQ(raw.params().values(), model.params().values());
    EXPECT_EQ(raw.stats.mean, model.stats.mean);
    EXPECT_EQ(raw.sigma_data, model.sigma_data);
}

TEST(Trainer, BestByEvalIsRetained) {
    TempDir dir("train_best");
    Rng init(1);
    aux::AuxModel model(tiny(), init);
    nn::ParameterSet& params = model.params();
    train::TrainOptions opts;
    opts.steps = 30;
    opts.checkpoint_dir = dir.path;
    opts.checkpoint_every = 10;
    opts.run_name = "best";
    train::Trainer trainer(params, opts, Rng(3));
    int calls = 0;
    const std::vector<double> scores{3.0, 1.0, 2.0};
    auto loss = [&](Rng& r, long) {
        nn::Var w = params.at(0);
        return train::StepLoss{nn::scale(nn::sum(nn::mul(w, w)), 1.0 + r.uniform()), {1.0}};
    };
    const auto result = trainer.run(loss, [&](Checkpoint& ck) { model.write_meta(ck); },
                                    [&] { return scores[calls++]; });
    ASSERT_TRUE(result.best_checkpoint.has_value());
    EXPECT_EQ(train::checkpoint_step(Checkpoint::load(*result.best_checkpoint)), 20);
}

TEST(Trainer, LossCsvHasHeaderAndRows) {
    TempDir dir("train_csv");
    std::vector<train::LossRow> rows{{0, 1.5, 0.3}, {1, 1.25, 0.4}};
    train::write_loss_csv(dir.path / "loss.csv", rows);
    std::ifstream in(dir.path / "loss.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    EXPECT_EQ(header, "step,loss,mean_sigma");
    EXPECT_EQ(first.substr(0, 5), "0,1.5");
}
