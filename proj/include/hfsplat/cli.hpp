#pragma once

// Command-line front end: gen-scene, train, render, eval and reenact.
// Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include "hfsplat/image_io.hpp"
#include "hfsplat/training.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace hfsplat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Switches that override what a checkpoint would enable at render time.
struct AblationFlags {
    bool no_hand_mlp = false;
    bool no_interaction_mlp = false;
    bool no_pbd = false;
    bool no_patch_loss = false;
    bool no_dynamics = false;
};

inline DynamicsSwitches render_switches(const TrainState& s, const AblationFlags& f) {
    DynamicsSwitches sw = stage_switches(s);
    if (f.no_dynamics) return DynamicsSwitches::none();
    sw.hand_mlp = sw.hand_mlp && !f.no_hand_mlp;
    sw.interaction_mlp = sw.interaction_mlp && !f.no_interaction_mlp;
    return sw;
}

inline std::vector<int> select_or_all(const std::vector<int>& chosen, int count, const char* what) {
    if (chosen.empty()) {
        std::vector<int> all(static_cast<std::size_t>(count));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    for (int v : chosen)
        if (v < 0 || v >= count)
            throw ValidationError(std::string(what) + " " + std::to_string(v) + " out of range [0, " +
                                  std::to_string(count) + ")");
    return chosen;
}

inline std::string frame_view_name(int k, int v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "frame_%03d_view_%02d.png", k, v);
    return buf;
}

inline std::string log_row(const StepRecord& r) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%d\t%lld\t%d\t%d\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g\t%zu\n", r.stage,
                  static_cast<long long>(r.step), r.frame, r.view, r.total, r.terms.l1, r.terms.dssim, r.terms.scale,
                  r.terms.position, r.terms.patch, r.gaussians);
    return buf;
}

inline constexpr const char* kLogHeader = "stage\tstep\tframe\tview\ttotal\tl1\tdssim\tscale\tposition\tpatch\tgaussians\n";

// ---------------------------------------------------------------------------
// Commands.

struct GenSceneArgs {
    std::string spec;
    std::string out;
    std::optional<std::uint64_t> seed;
};

inline int cmd_gen_scene(const GenSceneArgs& a, std::ostream& out) {
    SceneSpec spec;
    if (!a.spec.empty()) spec = scene_spec_from_json(detail::read_json_file(a.spec, a.spec));
    if (a.seed) spec.seed = *a.seed;
    spec.validate();
    const SceneDataset ds = generate_synthetic_scene(spec);
    save_dataset(ds, a.out);
    int inter = 0;
    for (const auto& fr : ds.frames) inter += fr.interaction;
    out << "wrote " << ds.num_frames() << " frames x " << ds.num_views() << " views to " << a.out << " ("
        << inter << " interaction frames)\n";
    return kExitOk;
}

struct TrainArgs {
    std::string dataset;
    std::string out;
    std::string config;
    std::string preset = "desk";
    std::string resume;
    std::string from_stage1;
    bool stage1_only = false;
    std::optional<int> stage1_steps, stage2_steps, threads, gaussians_per_face, hidden;
    std::optional<std::uint64_t> seed;
    AblationFlags flags;
};

inline TrainConfig apply_overrides(TrainConfig c, const TrainArgs& a) {
    if (a.stage1_steps) c.stage1_steps = *a.stage1_steps;
    if (a.stage2_steps) c.stage2_steps = *a.stage2_steps;
    if (a.threads) c.threads = *a.threads;
    if (a.gaussians_per_face) c.gaussians_per_face = *a.gaussians_per_face;
    if (a.hidden) c.hidden = *a.hidden;
    if (a.seed) c.seed = *a.seed;
    if (a.flags.no_hand_mlp) c.hand_mlp = false;
    if (a.flags.no_interaction_mlp) c.interaction_mlp = false;
    if (a.flags.no_pbd) c.pbd = false;
    if (a.flags.no_patch_loss) c.patch_loss = false;
    c.validate();
    return c;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    if (!a.resume.empty() && !a.from_stage1.empty())
        throw ValidationError("--resume and --from-stage1 are mutually exclusive");
    const SceneDataset ds = load_dataset(a.dataset, &err);
    const std::filesystem::path dir(a.out);
    std::filesystem::create_directories(dir);

    TrainState s;
    if (!a.resume.empty()) {
        s = read_checkpoint(a.resume);
        if (a.threads) s.config.threads = *a.threads;
    } else if (!a.from_stage1.empty()) {
        s = read_checkpoint(a.from_stage1);
        const std::int64_t done = s.step;
        s.config = apply_overrides(s.config, a);
        if (s.stage != 1 || done != s.config.stage1_steps)
            throw ValidationError(a.from_stage1 + ": not a completed stage-1 checkpoint");
    } else {
        TrainConfig c = TrainConfig::preset(a.preset);
        if (!a.config.empty()) c = TrainConfig::from_json(detail::read_json_file(a.config, a.config), c);
        s = init_training(ds, apply_overrides(c, a));
    }
    if (s.model.face_facets != ds.num_face_facets() ||
        s.model.hand_facets != static_cast<int>(ds.hand_faces.size()))
        throw ValidationError("checkpoint topology does not match the dataset");
    check_pose_dims(ds.frames[0].pose, s.model.net);
    detail::write_text(dir / "config.json", s.config.to_json().dump(1) + "\n");

    const bool append = !a.resume.empty();
    std::ofstream log(dir / "train_log.tsv", append ? std::ios::app : std::ios::trunc);
    if (std::filesystem::file_size(dir / "train_log.tsv") == 0) log << kLogHeader;
    TrainHooks hooks;
    hooks.dump_dir = dir;
    hooks.on_log = [&](const StepRecord& r) {
        log << log_row(r);
        log.flush();
        out << "stage " << r.stage << " step " << r.step << " loss " << r.total << " gaussians " << r.gaussians << "\n";
    };
    hooks.on_checkpoint = [&](const TrainState& st) {
        write_checkpoint(st, dir / ("stage" + std::to_string(st.stage) + "_step_" + std::to_string(st.step) + ".ckpt"));
    };

    PbdCache cache(ds, s.config.pbd);
    if (s.stage == 1) {
        run_stage(s, ds, cache, hooks);
        write_checkpoint(s, dir / "stage1.ckpt");
        out << "stage 1 done: " << s.model.gaussians.size() << " Gaussians\n";
        if (a.stage1_only) return kExitOk;
        begin_stage2(s);
    }
    run_stage(s, ds, cache, hooks);
    write_checkpoint(s, dir / "stage2.ckpt");
    out << "stage 2 done\n";
    return kExitOk;
}

struct RenderArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out;
    std::vector<int> frames;
    std::vector<int> views;
    AblationFlags flags;
};

inline int cmd_render(const RenderArgs& a, std::ostream& out, std::ostream& err) {
    const SceneDataset ds = load_dataset(a.dataset, &err);
    const TrainState s = read_checkpoint(a.checkpoint);
    const std::vector<int> frames = select_or_all(a.frames, ds.num_frames(), "frame");
    const std::vector<int> views = select_or_all(a.views, ds.num_views(), "view");
    std::filesystem::create_directories(a.out);
    PbdCache cache(ds, s.config.pbd && !a.flags.no_pbd);
    const DynamicsSwitches sw = render_switches(s, a.flags);
    const RenderSettings rs = s.config.render_settings();
    for (int k : frames) {
        const FrameGeometry geo = cache.geometry(k);
        const FrameData& fr = ds.frames[static_cast<std::size_t>(k)];
        for (int v : views) {
            const Image img = render_frame(s.model, geo, fr.pose, fr.cameras[static_cast<std::size_t>(v)], sw, rs);
            write_png((std::filesystem::path(a.out) / frame_view_name(k, v)).string(), img);
        }
    }
    out << "rendered " << frames.size() * views.size() << " images to " << a.out << "\n";
    return kExitOk;
}

struct EvalArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out;
    std::vector<int> views;
    AblationFlags flags;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const SceneDataset ds = load_dataset(a.dataset, &err);
    const TrainState s = read_checkpoint(a.checkpoint);
    std::vector<int> views = a.views;
    if (views.empty()) {
        if (ds.held_out_view < 0) throw ValidationError("dataset has no held-out view; pass --view");
        views = {ds.held_out_view};
    }
    views = select_or_all(views, ds.num_views(), "view");
    PbdCache cache(ds, s.config.pbd && !a.flags.no_pbd);
    const EvalResult r = evaluate(s.model, ds, cache, views, render_switches(s, a.flags), s.config.loss,
                                  s.config.render_settings());
    const std::string text = metrics_text(r);
    if (!a.out.empty()) detail::write_text(a.out, text);
    char buf[160];
    std::snprintf(buf, sizeof buf, "PSNR %.4f dB  SSIM %.5f  position violation %.6g\n", r.mean_psnr, r.mean_ssim,
                  r.mean_position_violation);
    out << buf;
    return kExitOk;
}

struct ReenactArgs {
    std::string checkpoint;
    std::string dataset;
    std::string poses;
    std::string out;
    std::vector<int> views;
};

/// Driving poses from a dataset directory or a JSON sequence file
/// {"format": "hfsplat-pose-sequence", "version": 1, "poses": [pose, ...]}.
inline std::vector<PoseState> read_driving_poses(const std::string& path, std::ostream& err) {
    std::vector<PoseState> poses;
    if (std::filesystem::is_directory(path)) {
        for (const auto& fr : load_dataset(path, &err).frames) poses.push_back(fr.pose);
        return poses;
    }
    const json j = detail::read_json_file(path, path);
    detail::check_version(j, "hfsplat-pose-sequence", path);
    if (!j.contains("poses") || !j.at("poses").is_array() || j.at("poses").empty())
        throw ValidationError(path + ": expected a non-empty 'poses' array");
    for (std::size_t k = 0; k < j.at("poses").size(); ++k)
        poses.push_back(detail::json_pose(j.at("poses")[k], path + " pose " + std::to_string(k)));
    return poses;
}

inline json pose_sequence_json(const std::vector<PoseState>& poses) {
    json arr = json::array();
    for (const auto& p : poses) arr.push_back(detail::pose_json(p));
    return json{{"format", "hfsplat-pose-sequence"}, {"version", kSceneVersion}, {"poses", arr}};
}

/// Poses the proxy rigs with the avatar's own shape and the driving pose.
inline std::pair<TriangleMesh, TriangleMesh> reenact_meshes(const SceneDataset& ds, const PoseState& drive) {
    static const FaceProxy face = make_face_proxy();
    static const HandProxy hand = make_finger_proxy();
    if (face.rig.num_vertices() != ds.face_vertex_count || hand.rig.num_vertices() != ds.hand_vertex_count ||
        face.rig.faces != ds.face_faces || hand.rig.faces != ds.hand_faces)
        throw ValidationError("dataset topology does not match the proxy rigs");
    const PoseState& own = ds.frames[static_cast<std::size_t>(ds.canonical_frame)].pose;
    return {face.rig.pose(own.beta_face, drive.psi, drive.theta_face, drive.r_face, drive.t_face),
            hand.rig.pose(own.beta_hand, VecX(), drive.theta_hand, drive.r_hand, drive.t_hand)};
}

inline int cmd_reenact(const ReenactArgs& a, std::ostream& out, std::ostream& err) {
    const SceneDataset ds = load_dataset(a.dataset, &err);
    const TrainState s = read_checkpoint(a.checkpoint);
    const std::vector<PoseState> poses = read_driving_poses(a.poses, err);
    const std::vector<int> views = select_or_all(a.views, ds.num_views(), "view");
    std::filesystem::create_directories(a.out);
    const std::vector<double> stiffness = dataset_stiffness(ds);
    const DynamicsSwitches sw = stage_switches(s);
    const RenderSettings rs = s.config.render_settings();
    for (std::size_t k = 0; k < poses.size(); ++k) {
        PoseState p = poses[k];
        p.beta_face = ds.frames[static_cast<std::size_t>(ds.canonical_frame)].pose.beta_face;
        p.beta_hand = ds.frames[static_cast<std::size_t>(ds.canonical_frame)].pose.beta_hand;
        check_pose_dims(p, s.model.net);
        auto [face, hand] = reenact_meshes(ds, p);
        const DeformationField field =
            s.config.pbd ? pbd_resolve_collisions(face, hand, stiffness) : no_deformation(face);
        const FrameGeometry geo = make_frame_geometry(std::move(face), std::move(hand), field);
        const int ki = static_cast<int>(k);
        for (int v : views) {
            const Camera& cam = ds.frames[static_cast<std::size_t>(ds.canonical_frame)].cameras[static_cast<std::size_t>(v)];
            const Image img = render_frame(s.model, geo, p, cam, sw, rs);
            write_png((std::filesystem::path(a.out) / frame_view_name(ki, v)).string(), img);
        }
    }
    out << "reenacted " << poses.size() << " poses x " << views.size() << " views to " << a.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// Parser.

inline void add_ablation_flags(CLI::App* app, AblationFlags& f, bool training) {
    app->add_flag("--no-hand-mlp", f.no_hand_mlp, "Disable the hand networks");
    app->add_flag("--no-interaction-mlp", f.no_interaction_mlp, "Disable the interaction network");
    app->add_flag("--no-pbd", f.no_pbd, "Disable collision resolution");
    if (training) {
        app->add_flag("--no-patch-loss", f.no_patch_loss, "Drop the hand/face patch loss");
    } else {
        app->add_flag("--no-dynamics", f.no_dynamics, "Render the static Gaussians only");
    }
}

/// Parses and runs one command.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Mesh-anchored Gaussian splatting avatars for hand-face interaction"};
    app.name("hfsplat");
    app.require_subcommand(1, 1);

    GenSceneArgs gen;
    auto* c_gen = app.add_subcommand("gen-scene", "Generate a synthetic multi-view hand-face dataset");
    c_gen->add_option("--spec", gen.spec, "Scene spec JSON (defaults otherwise)")->check(CLI::ExistingFile);
    c_gen->add_option("--out", gen.out, "Output dataset directory")->required();
    c_gen->add_option("--seed", gen.seed, "Override the spec seed");

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Run stage-1 and stage-2 optimization");
    c_train->add_option("--dataset", tr.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    c_train->add_option("--out", tr.out, "Output run directory")->required();
    c_train->add_option("--config", tr.config, "TrainConfig JSON overlaid on the preset")->check(CLI::ExistingFile);
    c_train->add_option("--preset", tr.preset, "desk or full")->capture_default_str();
    c_train->add_option("--resume", tr.resume, "Continue from a checkpoint with its own configuration")
        ->check(CLI::ExistingFile);
    c_train->add_option("--from-stage1", tr.from_stage1, "Run stage 2 from a completed stage-1 checkpoint")
        ->check(CLI::ExistingFile);
    c_train->add_flag("--stage1-only", tr.stage1_only, "Stop after stage 1");
    c_train->add_option("--stage1-steps", tr.stage1_steps, "Stage-1 step count");
    c_train->add_option("--stage2-steps", tr.stage2_steps, "Stage-2 step count");
    c_train->add_option("--threads", tr.threads, "Render threads");
    c_train->add_option("--gaussians-per-face", tr.gaussians_per_face, "Initial Gaussians per facet");
    c_train->add_option("--hidden", tr.hidden, "Network hidden width");
    c_train->add_option("--seed", tr.seed, "Random seed");
    add_ablation_flags(c_train, tr.flags, true);

    RenderArgs rd;
    auto* c_render = app.add_subcommand("render", "Render frames and views of a checkpoint");
    c_render->add_option("--checkpoint", rd.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    c_render->add_option("--dataset", rd.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    c_render->add_option("--out", rd.out, "Output image directory")->required();
    c_render->add_option("--frame", rd.frames, "Frame indices (default all)");
    c_render->add_option("--view", rd.views, "View indices (default all)");
    add_ablation_flags(c_render, rd.flags, false);

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "PSNR/SSIM against the dataset images");
    c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--dataset", ev.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    c_eval->add_option("--view", ev.views, "Views to score (default the held-out view)");
    c_eval->add_option("--out", ev.out, "Metrics table output file");
    add_ablation_flags(c_eval, ev.flags, false);

    ReenactArgs re;
    auto* c_re = app.add_subcommand("reenact", "Drive an avatar with a foreign pose sequence");
    c_re->add_option("--checkpoint", re.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    c_re->add_option("--dataset", re.dataset, "The avatar's dataset (cameras, topology, shape)")
        ->required()
        ->check(CLI::ExistingDirectory);
    c_re->add_option("--poses", re.poses, "Pose sequence JSON or a driving dataset directory")
        ->required()
        ->check(CLI::ExistingPath);
    c_re->add_option("--out", re.out, "Output image directory")->required();
    c_re->add_option("--view", re.views, "View indices (default all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }
    try {
        if (*c_gen) return cmd_gen_scene(gen, out);
        if (*c_train) return cmd_train(tr, out, err);
        if (*c_render) return cmd_render(rd, out, err);
        if (*c_eval) return cmd_eval(ev, out, err);
        if (*c_re) return cmd_reenact(re, out, err);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "runtime error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}

}  // namespace hfsplat::cli
