#include "hfsplat/cli.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace hfsplat;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "hfsplat");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), {});
}

const fs::path& root() {
    static const fs::path r = [] {
        const fs::path p = fs::temp_directory_path() / "hfsplat_cli";
        fs::remove_all(p);
        fs::create_directories(p);
        std::ofstream(p / "spec.json") << json{{"approach_frames", 2}, {"contact_frames", 2}, {"retreat_frames", 1},
                                               {"views", 3},           {"held_out_view", 2},  {"width", 32},
                                               {"height", 32},         {"supersample", 1}}
                                              .dump();
        std::ofstream(p / "train.json") << json{{"stage1_steps", 40},   {"stage2_steps", 10},   {"gaussians_per_face", 2},
                                                {"hidden", 8},          {"densify_from", 10},   {"densify_until", 30},
                                                {"densify_interval", 10}, {"log_every", 5}}
                                               .dump();
        return p;
    }();
    return r;
}

const fs::path& dataset() {
    static const fs::path d = [] {
        const fs::path p = root() / "data";
        const Result r = run({"gen-scene", "--spec", (root() / "spec.json").string(), "--out", p.string()});
        EXPECT_EQ(r.code, 0) << r.err;
        return p;
    }();
    return d;
}

const fs::path& trained() {
    static const fs::path d = [] {
        const fs::path p = root() / "run";
        const Result r = run({"train", "--dataset", dataset().string(), "--out", p.string(), "--config",
                              (root() / "train.json").string()});
        EXPECT_EQ(r.code, 0) << r.err;
        return p;
    }();
    return d;
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run({"--help"}).code, 0);
    EXPECT_EQ(run({"train", "--help"}).code, 0);
    EXPECT_EQ(run({}).code, cli::kExitValidation);
    EXPECT_EQ(run({"train"}).code, cli::kExitValidation);
    EXPECT_EQ(run({"eval", "--checkpoint", "/nonexistent", "--dataset", "/tmp"}).code, cli::kExitValidation);
    EXPECT_EQ(run({"gen-scene", "--out", "x", "--bogus"}).code, cli::kExitValidation);
}

TEST(Cli, GenSceneIsIdempotent) {
    const fs::path again = root() / "data_again";
    ASSERT_EQ(run({"gen-scene", "--spec", (root() / "spec.json").string(), "--out", again.string()}).code, 0);
    const SceneDataset a = load_dataset(dataset()), b = load_dataset(again);
    EXPECT_TRUE(a == b);
    EXPECT_EQ(slurp(dataset() / "frames" / "3" / "views" / "1.png"), slurp(again / "frames" / "3" / "views" / "1.png"));
}

TEST(Cli, GenSceneRejectsBadSpec) {
    std::ofstream(root() / "bad_spec.json") << R"({"views": 0})";
    const Result r = run({"gen-scene", "--spec", (root() / "bad_spec.json").string(), "--out", (root() / "x").string()});
    EXPECT_EQ(r.code, cli::kExitValidation);
    EXPECT_NE(r.err.find("view"), std::string::npos);
}

TEST(Cli, TrainWritesRunDirectory) {
    const fs::path run_dir = trained();
    for (const char* f : {"config.json", "stage1.ckpt", "stage2.ckpt", "train_log.tsv"})
        EXPECT_TRUE(fs::exists(run_dir / f)) << f;
    const std::string log = slurp(run_dir / "train_log.tsv");
    EXPECT_EQ(log.rfind(cli::kLogHeader, 0), 0u);
    EXPECT_GT(std::count(log.begin(), log.end(), '\n'), 8);
    const TrainState s = read_checkpoint(run_dir / "stage2.ckpt");
    EXPECT_EQ(s.stage, 2);
    EXPECT_EQ(s.step, 10);
}

TEST(Cli, TrainIsIdempotent) {
    const fs::path other = root() / "run_again";
    ASSERT_EQ(run({"train", "--dataset", dataset().string(), "--out", other.string(), "--config",
                   (root() / "train.json").string()})
                  .code,
              0);
    EXPECT_EQ(slurp(trained() / "stage2.ckpt"), slurp(other / "stage2.ckpt"));
    EXPECT_EQ(slurp(trained() / "train_log.tsv"), slurp(other / "train_log.tsv"));
}

TEST(Cli, ResumeFromStageOneMatchesFullRun) {
    const fs::path a = root() / "split_a";
    ASSERT_EQ(run({"train", "--dataset", dataset().string(), "--out", a.string(), "--config",
                   (root() / "train.json").string(), "--stage1-only"})
                  .code,
              0);
    EXPECT_FALSE(fs::exists(a / "stage2.ckpt"));
    EXPECT_EQ(slurp(a / "stage1.ckpt"), slurp(trained() / "stage1.ckpt"));
    const fs::path b = root() / "split_b";
    ASSERT_EQ(run({"train", "--dataset", dataset().string(), "--out", b.string(), "--resume", (a / "stage1.ckpt").string()})
                  .code,
              0);
    EXPECT_EQ(slurp(b / "stage2.ckpt"), slurp(trained() / "stage2.ckpt"));
}

TEST(Cli, FromStageOneAppliesAblationFlags) {
    const fs::path out = root() / "ablate";
    ASSERT_EQ(run({"train", "--dataset", dataset().string(), "--out", out.string(), "--from-stage1",
                   (trained() / "stage1.ckpt").string(), "--no-interaction-mlp"})
                  .code,
              0);
    const TrainState s = read_checkpoint(out / "stage2.ckpt");
    EXPECT_FALSE(s.config.interaction_mlp);
    EXPECT_TRUE(s.config.hand_mlp);
    const TrainState s1 = read_checkpoint(trained() / "stage1.ckpt");
    EXPECT_TRUE(s.model.interaction == s1.model.interaction);
    // a stage-2 checkpoint is not a valid stage-2 starting point
    EXPECT_EQ(run({"train", "--dataset", dataset().string(), "--out", (root() / "bad").string(), "--from-stage1",
                   (out / "stage2.ckpt").string()})
                  .code,
              cli::kExitValidation);
}

TEST(Cli, NoDynamicsReproducesStageOneWithZeroedNetworks) {
    const fs::path out = root() / "zero2";
    ASSERT_EQ(run({"train", "--dataset", dataset().string(), "--out", out.string(), "--from-stage1",
                   (trained() / "stage1.ckpt").string(), "--stage2-steps", "0"})
                  .code,
              0);
    const std::string ds = dataset().string();
    ASSERT_EQ(run({"render", "--checkpoint", (trained() / "stage1.ckpt").string(), "--dataset", ds, "--out",
                   (root() / "r1").string(), "--frame", "2"})
                  .code,
              0);
    ASSERT_EQ(run({"render", "--checkpoint", (out / "stage2.ckpt").string(), "--dataset", ds, "--out",
                   (root() / "r2").string(), "--frame", "2", "--no-dynamics"})
                  .code,
              0);
    ASSERT_EQ(run({"render", "--checkpoint", (out / "stage2.ckpt").string(), "--dataset", ds, "--out",
                   (root() / "r3").string(), "--frame", "2"})
                  .code,
              0);
    for (int v = 0; v < 3; ++v) {
        const std::string name = cli::frame_view_name(2, v);
        EXPECT_EQ(slurp(root() / "r1" / name), slurp(root() / "r2" / name)) << name;
        EXPECT_EQ(slurp(root() / "r1" / name), slurp(root() / "r3" / name)) << name;
    }
}

TEST(Cli, RenderRejectsOutOfRangeSelection) {
    const Result r = run({"render", "--checkpoint", (trained() / "stage2.ckpt").string(), "--dataset",
                          dataset().string(), "--out", (root() / "r_bad").string(), "--view", "9"});
    EXPECT_EQ(r.code, cli::kExitValidation);
    EXPECT_NE(r.err.find("view 9"), std::string::npos);
}

TEST(Cli, EvalWritesMetricsAndTrainingViewScoresHigher) {
    const std::string ck = (trained() / "stage2.ckpt").string(), ds = dataset().string();
    const fs::path held = root() / "held.tsv", train_view = root() / "train_view.tsv";
    const Result r = run({"eval", "--checkpoint", ck, "--dataset", ds, "--out", held.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("PSNR"), std::string::npos);
    ASSERT_EQ(run({"eval", "--checkpoint", ck, "--dataset", ds, "--view", "0", "--out", train_view.string()}).code, 0);
    auto mean_psnr = [](const fs::path& p) {
        std::istringstream in(slurp(p));
        std::string line;
        while (std::getline(in, line))
            if (line.rfind("mean\t", 0) == 0) return std::stod(line.substr(line.find('\t', 5) + 1));
        return -1.0;
    };
    EXPECT_GT(mean_psnr(train_view), mean_psnr(held));
    ASSERT_EQ(run({"eval", "--checkpoint", ck, "--dataset", ds, "--out", (root() / "held2.tsv").string()}).code, 0);
    EXPECT_EQ(slurp(held), slurp(root() / "held2.tsv"));
}

TEST(Cli, SelfReenactmentEqualsRender) {
    const std::string ck = (trained() / "stage2.ckpt").string(), ds = dataset().string();
    ASSERT_EQ(run({"render", "--checkpoint", ck, "--dataset", ds, "--out", (root() / "self_render").string()}).code, 0);
    const Result r = run({"reenact", "--checkpoint", ck, "--dataset", ds, "--poses", ds, "--out",
                          (root() / "self_reenact").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const SceneDataset d = load_dataset(ds);
    for (int k = 0; k < d.num_frames(); ++k)
        for (int v = 0; v < d.num_views(); ++v) {
            const std::string name = cli::frame_view_name(k, v);
            EXPECT_EQ(slurp(root() / "self_render" / name), slurp(root() / "self_reenact" / name)) << name;
        }
}

TEST(Cli, ReenactFromPoseSequenceFile) {
    const SceneDataset d = load_dataset(dataset());
    std::vector<PoseState> poses{d.frames[3].pose, d.frames[1].pose};
    poses[0].beta_face *= 5.0;  // foreign shape is ignored
    std::ofstream(root() / "poses.json") << cli::pose_sequence_json(poses).dump();
    const std::string ck = (trained() / "stage2.ckpt").string();
    ASSERT_EQ(run({"reenact", "--checkpoint", ck, "--dataset", dataset().string(), "--poses",
                   (root() / "poses.json").string(), "--out", (root() / "seq").string(), "--view", "1"})
                  .code,
              0);
    ASSERT_EQ(run({"render", "--checkpoint", ck, "--dataset", dataset().string(), "--out",
                   (root() / "seq_ref").string(), "--frame", "3", "--view", "1"})
                  .code,
              0);
    EXPECT_TRUE(fs::exists(root() / "seq" / cli::frame_view_name(1, 1)));
    EXPECT_EQ(slurp(root() / "seq" / cli::frame_view_name(0, 1)), slurp(root() / "seq_ref" / cli::frame_view_name(3, 1)));

    std::ofstream(root() / "bad_poses.json") << R"({"format": "hfsplat-pose-sequence", "version": 1, "poses": []})";
    EXPECT_EQ(run({"reenact", "--checkpoint", ck, "--dataset", dataset().string(), "--poses",
                   (root() / "bad_poses.json").string(), "--out", (root() / "seq2").string()})
                  .code,
              cli::kExitValidation);
}

TEST(Cli, CorruptInputsGiveValidationExit) {
    const fs::path bad = root() / "bad.ckpt";
    std::ofstream(bad) << "HFSCKPT1 garbage";
    EXPECT_EQ(run({"eval", "--checkpoint", bad.string(), "--dataset", dataset().string()}).code, cli::kExitValidation);
    const fs::path broken = root() / "broken_data";
    fs::remove_all(broken);
    fs::copy(dataset(), broken, fs::copy_options::recursive);
    fs::remove(broken / "frames" / "1" / "mesh_face");
    const Result r = run({"eval", "--checkpoint", (trained() / "stage2.ckpt").string(), "--dataset", broken.string()});
    EXPECT_EQ(r.code, cli::kExitValidation);
    EXPECT_NE(r.err.find("frame 1"), std::string::npos) << r.err;
}

TEST(Cli, UnwritableOutputIsRuntimeFailure) {
    const fs::path blocker = root() / "blocker";
    std::ofstream(blocker) << "x";
    const Result r = run({"render", "--checkpoint", (trained() / "stage2.ckpt").string(), "--dataset",
                          dataset().string(), "--out", (blocker / "sub").string()});
    EXPECT_EQ(r.code, cli::kExitRuntime) << r.err;
}
