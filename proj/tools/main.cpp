#include <CLI11.hpp>

#include "callosum/checkpoint.hpp"
#include "callosum/dataset.hpp"
#include "callosum/errors.hpp"
#include "callosum/evaluate.hpp"
#include "callosum/image.hpp"
#include "callosum/infer.hpp"
#include "callosum/kernels.hpp"
#include "callosum/model.hpp"
#include "callosum/morphometry.hpp"
#include "callosum/rng.hpp"
#include "callosum/synthgen.hpp"
#include "callosum/train.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace callosum;

namespace {

std::string read_text_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw RuntimeFailure("cannot open " + tmp + " for writing");
        f << text;
        if (!f.flush()) throw RuntimeFailure("write failed for " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw RuntimeFailure("cannot rename " + tmp + ": " + ec.message());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw RuntimeFailure("cannot create " + dir.string() + ": " + ec.message());
}

// Copied byte-for-byte so the output directory records exactly what ran.
void log_config_verbatim(const std::string& text, const fs::path& out_dir, const char* name) {
    ensure_dir(out_dir);
    write_text_file(out_dir / name, text);
}

int leading_annotated_rows(const MosaicManifest& m) {
    for (int iy = 0; iy < m.grid_ny; ++iy)
        for (int ix = 0; ix < m.grid_nx; ++ix) {
            const ManifestEntry* e = m.find(ix, iy);
            if (!e || !e->annotated) return iy;
        }
    return m.grid_ny;
}

struct SynthArgs {
    std::string config;
    std::string out;
    int workers = 0;
    int64_t seed = -1;
};

int cmd_synth(const SynthArgs& a) {
    const std::string text = read_text_file(a.config);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("synth config is not valid json: ") + e.what());
    }
    if (!j.is_object()) throw DataError("synth config must be a json object");

    const int nx = j.value("grid_nx", 1);
    const int ny = j.value("grid_ny", 1);
    const double pixel_nm = j.value("pixel_nm", 4.0);
    uint64_t seed = j.value("seed", uint64_t{0});
    if (a.seed >= 0) seed = static_cast<uint64_t>(a.seed);
    if (nx < 1 || ny < 1) throw DataError("synth config: grid dimensions must be positive");

    SyntheticSceneSpec base;
    if (j.contains("scene")) {
        const auto& s = j["scene"];
        if (!s.is_object()) throw DataError("synth config: \"scene\" must be an object");
        base.patch_px = s.value("patch_px", base.patch_px);
        base.fiber_count = s.value("fiber_count", base.fiber_count);
        base.inner_radius_min = s.value("inner_radius_min", base.inner_radius_min);
        base.inner_radius_max = s.value("inner_radius_max", base.inner_radius_max);
        base.g_ratio_min = s.value("g_ratio_min", base.g_ratio_min);
        base.g_ratio_max = s.value("g_ratio_max", base.g_ratio_max);
        base.elongation_prob = s.value("elongation_prob", base.elongation_prob);
        base.node_prob = s.value("node_prob", base.node_prob);
        base.demyelination_prob = s.value("demyelination_prob", base.demyelination_prob);
        base.noise_level = s.value("noise_level", base.noise_level);
        base.min_gap_px = s.value("min_gap_px", base.min_gap_px);
    }

    std::vector<SyntheticSceneSpec> specs;
    for (int iy = 0; iy < ny; ++iy)
        for (int ix = 0; ix < nx; ++ix) {
            SyntheticSceneSpec s = base;
            s.seed = Rng::derive_seed(seed, static_cast<uint64_t>(ix), static_cast<uint64_t>(iy));
            s.validate();
            specs.push_back(s);
        }

    ensure_dir(a.out);
    log_config_verbatim(text, a.out, "synth_config.json");
    MosaicManifest m = generate_mosaic(specs, nx, ny, pixel_nm, a.out);

    if (j.contains("splits")) {
        const auto& sp = j["splits"];
        if (!sp.is_object()) throw DataError("synth config: \"splits\" must be an object");
        auto range = [&](const char* key) {
            YRange r;
            if (sp.contains(key)) {
                const auto& v = sp[key];
                if (!v.is_array() || v.size() != 2)
                    throw DataError(std::string("synth config: splits.") + key +
                                    " must be [begin, end)");
                r.begin = v[0].get<int>();
                r.end = v[1].get<int>();
            }
            return r;
        };
        assign_splits(m, range("train"), range("val"), range("test"));
        save_manifest(m, fs::path(a.out) / "manifest.txt");
    }

    std::printf("wrote %d patches to %s\n", nx * ny, a.out.c_str());
    return 0;
}

struct TrainArgs {
    std::string manifest;
    std::string config;
    std::string out;
    std::string model_config;
    std::string resume;
    std::string snapshot;
    std::string import_ckpt;
    int workers = 0;
    int64_t seed = -1;
};

int cmd_train(const TrainArgs& a) {
    // single worker by default so runs are step-for-step reproducible
    kernels::set_default_workers(a.workers > 0 ? a.workers : 1);

    const std::string cfg_text = read_text_file(a.config);
    TrainConfig cfg = TrainConfig::from_json(cfg_text);
    if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);

    MosaicManifest m = load_manifest(a.manifest);
    auto train_set = load_split_samples(m, SplitTag::train);
    auto val_set = load_split_samples(m, SplitTag::val);
    if (train_set.empty()) throw DataError("manifest has no annotated train patches");
    if (val_set.empty()) throw DataError("manifest has no annotated val patches");

    int source_count = (a.resume.empty() ? 0 : 1) + (a.snapshot.empty() ? 0 : 1) +
                       (a.import_ckpt.empty() ? 0 : 1);
    if (source_count > 1)
        throw UsageError("--resume, --snapshot and --import are mutually exclusive");

    ensure_dir(a.out);
    log_config_verbatim(cfg_text, a.out, "train_config.json");

    std::optional<SegModel> model;
    TrainState state;
    bool resumed = false;
    if (!a.resume.empty()) {
        auto [mdl, st] = load_train_state(a.resume);
        model.emplace(std::move(mdl));
        state = std::move(st);
        resumed = true;
        std::printf("resuming from step %lld\n", static_cast<long long>(state.step));
    } else {
        EncoderConfig mc;
        mc.input_px = m.patch_px;
        if (!a.model_config.empty()) {
            const std::string mc_text = read_text_file(a.model_config);
            mc = EncoderConfig::from_json(mc_text);
            log_config_verbatim(mc_text, a.out, "model_config.json");
        }
        if (!a.snapshot.empty()) {
            model.emplace(load_snapshot(a.snapshot));
        } else if (!a.import_ckpt.empty()) {
            Checkpoint donor = load_checkpoint(a.import_ckpt);
            LoadReport report;
            model.emplace(surgery_import(donor, mc, Rng::derive_seed(cfg.seed, 0x6d6f64), &report));
            std::printf("%s\n", report.summary().c_str());
        } else {
            model.emplace(SegModel(mc, Rng::derive_seed(cfg.seed, 0x6d6f64)));
        }
    }
    if (model->config().input_px != m.patch_px)
        throw DataError("model input is " + std::to_string(model->config().input_px) +
                        "px but manifest patches are " + std::to_string(m.patch_px) + "px");

    std::ofstream log(fs::path(a.out) / "train.log",
                      std::ios::binary | (resumed ? std::ios::app : std::ios::trunc));
    if (!log) throw RuntimeFailure("cannot open train.log under " + a.out);

    TrainState final_state = train_loop(*model, train_set, val_set, cfg, a.out, &log,
                                        resumed ? &state : nullptr);
    std::printf("finished at step %lld; best val mIoU %.6f at step %lld\n",
                static_cast<long long>(final_state.step), final_state.best_miou,
                static_cast<long long>(final_state.best_step));
    std::printf("snapshots in %s (best.ckpt, last.ckpt)\n", a.out.c_str());
    return 0;
}

struct ExpandArgs {
    std::string manifest;
    std::string snapshot;
    std::string out;
    std::string state_path;
    int band_rows = 4;
    double threshold = 0.5;
    int stride = 0;
    int workers = 0;
};

int cmd_expand(const ExpandArgs& a) {
    kernels::set_default_workers(a.workers > 0 ? a.workers : kernels::default_workers());
    if (a.threshold <= 0.0 || a.threshold >= 1.0)
        throw UsageError("threshold must be in (0, 1)");

    MosaicManifest m = load_manifest(a.manifest);
    SegModel model = load_snapshot(a.snapshot);
    ModelTilePredictor pred(model);
    const int stride = a.stride > 0 ? a.stride : pred.tile_px() / 2;

    const fs::path state_path =
        a.state_path.empty() ? fs::path(a.out) / "band.state" : fs::path(a.state_path);
    BandState state;
    if (fs::exists(state_path)) {
        state = load_band_state(state_path, m.grid_ny);
    } else {
        state.annotated_end = leading_annotated_rows(m);
    }

    ensure_dir(a.out);
    BandExport ex = expand_band(pred, m, state, a.band_rows, static_cast<float>(a.threshold),
                                stride, fs::path(a.out) / "bands",
                                fs::path(a.snapshot).filename().string());
    if (ex.done) {
        std::printf("annotation complete: all %d patch rows are annotated\n", m.grid_ny);
        return 0;
    }
    save_band_state(ex.state, state_path);
    if (!ex.notice.empty()) std::printf("notice: %s\n", ex.notice.c_str());
    std::printf("exported band [%d, %d) to %s\n", ex.state.pending_begin, ex.state.pending_end,
                ex.band_dir.string().c_str());
    std::printf("proofread the pred_*.pgm files, then run: callosum ingest --manifest %s "
                "--state %s --corrected <dir>\n",
                a.manifest.c_str(), state_path.string().c_str());
    return 0;
}

struct IngestArgs {
    std::string manifest;
    std::string corrected;
    std::string state_path;
};

int cmd_ingest(const IngestArgs& a) {
    MosaicManifest m = load_manifest(a.manifest);
    BandState state = load_band_state(a.state_path, m.grid_ny);
    BandState next = ingest_corrections(m, state, a.corrected, a.manifest);
    save_band_state(next, a.state_path);
    std::printf("ingested band [%d, %d); annotated rows now [%d, %d)\n", state.pending_begin,
                state.pending_end, next.annotated_begin, next.annotated_end);
    return 0;
}

struct EvalArgs {
    std::string manifest;
    std::string snapshot;
    std::string split = "test";
    std::string out;
    std::string method;
    double threshold = 0.5;
    int stride = 0;
    int workers = 0;
};

int cmd_eval(const EvalArgs& a) {
    kernels::set_default_workers(a.workers > 0 ? a.workers : kernels::default_workers());
    if (a.threshold <= 0.0 || a.threshold >= 1.0)
        throw UsageError("threshold must be in (0, 1)");
    auto tag = parse_split(a.split);
    if (!tag) throw UsageError("unknown split \"" + a.split + "\"");

    MosaicManifest m = load_manifest(a.manifest);
    auto samples = load_split_samples(m, *tag);
    if (samples.empty())
        throw DataError("no annotated patches in split \"" + a.split + "\"");

    SegModel model = load_snapshot(a.snapshot);
    ModelTilePredictor pred(model);
    const int stride = a.stride > 0 ? a.stride : pred.tile_px() / 2;

    IoUCounts total;
    for (const auto& s : samples) {
        ProbabilityPair probs = predict_image(pred, s.image, stride);
        std::vector<float> packed(2 * probs.axon.size());
        std::copy(probs.axon.begin(), probs.axon.end(), packed.begin());
        std::copy(probs.myelin.begin(), probs.myelin.end(), packed.begin() + probs.axon.size());
        ClassMask predicted =
            to_class_mask(packed, probs.width, probs.height, static_cast<float>(a.threshold));
        total += overlap_counts(predicted, s.label);
    }
    IoUReport report = report_from_counts(total, a.split);

    BenchmarkRow local;
    local.method = a.method.empty() ? fs::path(a.snapshot).filename().string() : a.method;
    local.miou = report.miou;
    local.iou_axon = report.iou_axon;
    local.iou_myelin = report.iou_myelin;
    local.source = "local";
    auto rows = benchmark_rows({local});

    std::printf("%zu patches in split \"%s\"\n", samples.size(), a.split.c_str());
    std::fputs(format_benchmark_table(rows).c_str(), stdout);
    if (!a.out.empty()) {
        ensure_dir(a.out);
        write_text_file(fs::path(a.out) / "eval_report.csv", benchmark_csv(rows));
        std::printf("wrote %s\n", (fs::path(a.out) / "eval_report.csv").string().c_str());
    }
    return 0;
}

struct MorphoArgs {
    std::string manifest;
    std::string out;
    std::string roi;
    std::string config;
    int workers = 0;
    bool resume = false;
};

int cmd_morpho(const MorphoArgs& a) {
    const int workers = a.workers > 0 ? a.workers : kernels::default_workers();
    kernels::set_default_workers(workers);

    MorphometryOptions opt;
    if (!a.config.empty()) {
        const std::string text = read_text_file(a.config);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("metric config is not valid json: ") + e.what());
        }
        if (!j.is_object()) throw DataError("metric config must be a json object");
        opt.metric_patch_px = j.value("metric_patch_px", opt.metric_patch_px);
        opt.downsample_factor = j.value("downsample_factor", opt.downsample_factor);
        opt.min_component_area = j.value("min_component_area", opt.min_component_area);
        ensure_dir(a.out);
        log_config_verbatim(text, a.out, "metric_config.json");
    }

    MosaicManifest m = load_manifest(a.manifest);
    MetricGridSpec grid = make_metric_grid(m, opt.metric_patch_px, opt.downsample_factor);
    std::printf("metric grid %dx%d (%d nm/px cells of %d px)\n", grid.gx, grid.gy,
                static_cast<int>(grid.pitch_nm(m.pixel_nm)), opt.metric_patch_px);

    RoiMask roi(grid.gx, grid.gy, true);
    if (!a.roi.empty()) {
        Image8 img = read_pgm(a.roi);
        if (img.width != grid.gx || img.height != grid.gy)
            throw DataError("ROI image is " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + ", metric grid is " +
                            std::to_string(grid.gx) + "x" + std::to_string(grid.gy));
        roi = roi_from_image(img);
    }

    ensure_dir(a.out);
    const fs::path records_path = fs::path(a.out) / "records.csv";
    SlideMorphometry prior;
    const SlideMorphometry* resume_from = nullptr;
    if (a.resume && fs::exists(records_path)) {
        prior = load_records_csv(records_path, grid);
        resume_from = &prior;
    }

    SlideMorphometry s = slide_morphometry(m, opt, roi, workers, resume_from, &records_path);
    render_maps(s, a.out);
    std::fputs((slide_summary(s) + "\n").c_str(), stdout);
    std::printf("wrote records.csv and 6 maps to %s\n", a.out.c_str());
    return 0;
}

struct MapsArgs {
    std::string manifest;
    std::string records;
    std::string out;
    std::string config;
};

int cmd_maps(const MapsArgs& a) {
    MorphometryOptions opt;
    if (!a.config.empty()) {
        const std::string text = read_text_file(a.config);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("metric config is not valid json: ") + e.what());
        }
        opt.metric_patch_px = j.value("metric_patch_px", opt.metric_patch_px);
        opt.downsample_factor = j.value("downsample_factor", opt.downsample_factor);
    }
    MosaicManifest m = load_manifest(a.manifest);
    MetricGridSpec grid = make_metric_grid(m, opt.metric_patch_px, opt.downsample_factor);
    SlideMorphometry s = load_records_csv(a.records, grid);
    ensure_dir(a.out);
    render_maps(s, a.out);
    std::fputs((slide_summary(s) + "\n").c_str(), stdout);
    std::printf("wrote 6 maps to %s\n", a.out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"segmentation and morphometry toolkit for EM mosaics of myelinated axons"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s_synth = app.add_subcommand("synth", "generate a synthetic mosaic with ground truth");
    s_synth->add_option("--config", synth.config, "scene/grid json config")->required();
    s_synth->add_option("--out", synth.out, "output directory")->required();
    s_synth->add_option("--workers", synth.workers, "worker threads");
    s_synth->add_option("--seed", synth.seed, "override the config seed");

    TrainArgs train;
    auto* s_train = app.add_subcommand("train", "train a model on annotated splits");
    s_train->add_option("--manifest", train.manifest, "mosaic manifest")->required();
    s_train->add_option("--config", train.config, "train config json")->required();
    s_train->add_option("--out", train.out, "output directory")->required();
    s_train->add_option("--model-config", train.model_config, "encoder/decoder config json");
    s_train->add_option("--resume", train.resume, "resume from a last.ckpt train state");
    s_train->add_option("--snapshot", train.snapshot, "start from a model snapshot");
    s_train->add_option("--import", train.import_ckpt,
                        "surgery-import a promptable-segmentation checkpoint");
    s_train->add_option("--workers", train.workers, "worker threads (default 1: deterministic)");
    s_train->add_option("--seed", train.seed, "override the config seed");

    ExpandArgs expand;
    auto* s_expand = app.add_subcommand("expand", "predict the next annotation band");
    s_expand->add_option("--manifest", expand.manifest, "mosaic manifest")->required();
    s_expand->add_option("--snapshot", expand.snapshot, "model snapshot")->required();
    s_expand->add_option("--out", expand.out, "output directory")->required();
    s_expand->add_option("--state", expand.state_path, "band state file (default <out>/band.state)");
    s_expand->add_option("--band-rows", expand.band_rows, "patch rows per band");
    s_expand->add_option("--threshold", expand.threshold, "class threshold");
    s_expand->add_option("--stride", expand.stride, "tile stride px (default tile/2)");
    s_expand->add_option("--workers", expand.workers, "worker threads");

    IngestArgs ingest;
    auto* s_ingest = app.add_subcommand("ingest", "ingest proofread band corrections");
    s_ingest->add_option("--manifest", ingest.manifest, "mosaic manifest")->required();
    s_ingest->add_option("--corrected", ingest.corrected, "directory of corrected pred_*.pgm")
        ->required();
    s_ingest->add_option("--state", ingest.state_path, "band state file")->required();

    EvalArgs eval;
    auto* s_eval = app.add_subcommand("eval", "evaluate a snapshot against labels");
    s_eval->add_option("--manifest", eval.manifest, "mosaic manifest")->required();
    s_eval->add_option("--snapshot", eval.snapshot, "model snapshot")->required();
    s_eval->add_option("--split", eval.split, "split to evaluate (default test)");
    s_eval->add_option("--threshold", eval.threshold, "class threshold");
    s_eval->add_option("--stride", eval.stride, "tile stride px (default tile/2)");
    s_eval->add_option("--out", eval.out, "directory for eval_report.csv");
    s_eval->add_option("--method", eval.method, "row label (default snapshot name)");
    s_eval->add_option("--workers", eval.workers, "worker threads");

    MorphoArgs morpho;
    auto* s_morpho = app.add_subcommand("morpho", "compute morphometry grid and maps");
    s_morpho->add_option("--manifest", morpho.manifest, "mosaic manifest")->required();
    s_morpho->add_option("--out", morpho.out, "output directory")->required();
    s_morpho->add_option("--roi", morpho.roi, "ROI mask pgm at metric-grid resolution");
    s_morpho->add_option("--config", morpho.config, "metric config json");
    s_morpho->add_option("--workers", morpho.workers, "worker threads");
    s_morpho->add_flag("--resume", morpho.resume, "reuse cells from an earlier records.csv");

    MapsArgs maps;
    auto* s_maps = app.add_subcommand("maps", "re-render maps from a records.csv");
    s_maps->add_option("--manifest", maps.manifest, "mosaic manifest")->required();
    s_maps->add_option("--records", maps.records, "records.csv from morpho")->required();
    s_maps->add_option("--out", maps.out, "output directory")->required();
    s_maps->add_option("--config", maps.config, "metric config json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        if (app.got_subcommand(s_synth)) return cmd_synth(synth);
        if (app.got_subcommand(s_train)) return cmd_train(train);
        if (app.got_subcommand(s_expand)) return cmd_expand(expand);
        if (app.got_subcommand(s_ingest)) return cmd_ingest(ingest);
        if (app.got_subcommand(s_eval)) return cmd_eval(eval);
        if (app.got_subcommand(s_morpho)) return cmd_morpho(morpho);
        if (app.got_subcommand(s_maps)) return cmd_maps(maps);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const RuntimeFailure& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
