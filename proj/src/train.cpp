#include "callosum/train.hpp"

#include "callosum/checkpoint.hpp"
#include "callosum/errors.hpp"
#include "callosum/evaluate.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace callosum {

namespace {

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.8g", v);
    return buf;
}

} // namespace

void TrainConfig::validate() const {
    if (total_steps < 0) throw UsageError("total_steps must be >= 0");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (warmup_steps < 0) throw UsageError("warmup_steps must be >= 0");
    if (total_steps > 0 && warmup_steps >= total_steps)
        throw UsageError("warmup_steps must be < total_steps");
    if (min_lr < 0.0) throw UsageError("min_lr must be >= 0");
    if (!(base_lr > min_lr)) throw UsageError("base_lr must be > min_lr");
    if (momentum < 0.0 || momentum >= 1.0) throw UsageError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw UsageError("weight_decay must be >= 0");
    if (!(threshold > 0.f && threshold < 1.f)) throw UsageError("threshold must be in (0, 1)");
    if (checkpoint_every < 1) throw UsageError("checkpoint_every must be >= 1");
}

std::string TrainConfig::to_json() const {
    nlohmann::ordered_json j;
    j["total_steps"] = total_steps;
    j["batch_size"] = batch_size;
    j["base_lr"] = base_lr;
    j["warmup_steps"] = warmup_steps;
    j["min_lr"] = min_lr;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["threshold"] = threshold;
    j["augment_flips"] = augment_flips;
    j["augment_rot90"] = augment_rot90;
    j["augment_photometric"] = augment_photometric;
    j["seed"] = seed;
    j["checkpoint_every"] = checkpoint_every;
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("train config is not valid json: ") + e.what());
    }
    if (!j.is_object()) throw DataError("train config must be a json object");
    TrainConfig c;
    const auto get_i64 = [&](const char* key, int64_t& slot) {
        if (!j.contains(key)) return;
        if (!j[key].is_number_integer()) throw DataError(std::string("config key '") + key + "' must be an integer");
        slot = j[key].get<int64_t>();
    };
    const auto get_num = [&](const char* key, double& slot) {
        if (!j.contains(key)) return;
        if (!j[key].is_number()) throw DataError(std::string("config key '") + key + "' must be a number");
        slot = j[key].get<double>();
    };
    const auto get_bool = [&](const char* key, bool& slot) {
        if (!j.contains(key)) return;
        if (!j[key].is_boolean()) throw DataError(std::string("config key '") + key + "' must be a boolean");
        slot = j[key].get<bool>();
    };
    get_i64("total_steps", c.total_steps);
    if (j.contains("batch_size")) {
        if (!j["batch_size"].is_number_integer()) throw DataError("config key 'batch_size' must be an integer");
        c.batch_size = j["batch_size"].get<int>();
    }
    get_num("base_lr", c.base_lr);
    get_i64("warmup_steps", c.warmup_steps);
    get_num("min_lr", c.min_lr);
    get_num("momentum", c.momentum);
    get_num("weight_decay", c.weight_decay);
    if (j.contains("threshold")) {
        if (!j["threshold"].is_number()) throw DataError("config key 'threshold' must be a number");
        c.threshold = j["threshold"].get<float>();
    }
    get_bool("augment_flips", c.augment_flips);
    get_bool("augment_rot90", c.augment_rot90);
    get_bool("augment_photometric", c.augment_photometric);
    if (j.contains("seed")) {
        if (!j["seed"].is_number_integer()) throw DataError("config key 'seed' must be an integer");
        c.seed = j["seed"].get<uint64_t>();
    }
    get_i64("checkpoint_every", c.checkpoint_every);
    try {
        c.validate();
    } catch (const UsageError& e) {
        throw DataError(std::string("train config: ") + e.what());
    }
    return c;
}

double lr_at(const TrainConfig& cfg, int64_t step) {
    if (step < 0 || step > cfg.total_steps)
        throw UsageError("lr_at: step " + std::to_string(step) + " outside [0, " +
                         std::to_string(cfg.total_steps) + "]");
    if (step <= cfg.warmup_steps) {
        if (cfg.warmup_steps == 0) return cfg.base_lr;
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    double progress = static_cast<double>(step - cfg.warmup_steps) /
                      static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double bce_loss(const ProbabilityPair& pred, const ClassMask& target) {
    if (pred.width != target.width || pred.height != target.height)
        throw UsageError("bce_loss: prediction " + std::to_string(pred.width) + "x" +
                         std::to_string(pred.height) + " vs target " + std::to_string(target.width) +
                         "x" + std::to_string(target.height));
    const size_t n = target.size();
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        uint8_t cls = target.values[i];
        if (cls > kClassMyelin)
            throw DataError("bce_loss: target class " + std::to_string(cls) + " out of range");
        double ta = cls == kClassAxon ? 1.0 : 0.0;
        double tm = cls == kClassMyelin ? 1.0 : 0.0;
        double pa = std::clamp(static_cast<double>(pred.axon[i]), kBceEps, 1.0 - kBceEps);
        double pm = std::clamp(static_cast<double>(pred.myelin[i]), kBceEps, 1.0 - kBceEps);
        sum -= ta * std::log(pa) + (1.0 - ta) * std::log(1.0 - pa);
        sum -= tm * std::log(pm) + (1.0 - tm) * std::log(1.0 - pm);
    }
    return sum / (2.0 * static_cast<double>(n));
}

namespace {

template <typename R>
R flip_h_impl(const R& in) {
    R out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            out.at(x, y) = in.at(in.width - 1 - x, y);
    return out;
}

template <typename R>
R flip_v_impl(const R& in) {
    R out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            out.at(x, y) = in.at(x, in.height - 1 - y);
    return out;
}

// One counter-clockwise quarter turn: (x, y) <- (w-1-y, x) of the input.
template <typename R>
R rot90_once(const R& in) {
    R out(in.height, in.width);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            out.at(x, y) = in.at(in.width - 1 - y, x);
    return out;
}

template <typename R>
R rot90k_impl(const R& in, int k) {
    k = ((k % 4) + 4) % 4;
    R out = in;
    for (int i = 0; i < k; ++i) out = rot90_once(out);
    return out;
}

} // namespace

Image8 flip_h(const Image8& img) { return flip_h_impl(img); }
Image8 flip_v(const Image8& img) { return flip_v_impl(img); }
Image8 rot90k(const Image8& img, int k) { return rot90k_impl(img, k); }
ClassMask flip_h(const ClassMask& mask) { return flip_h_impl(mask); }
ClassMask flip_v(const ClassMask& mask) { return flip_v_impl(mask); }
ClassMask rot90k(const ClassMask& mask, int k) { return rot90k_impl(mask, k); }

void augment(Image8& img, ClassMask& mask, bool flips, bool rot90, bool photometric, Rng& rng) {
    if (img.width != mask.width || img.height != mask.height)
        throw UsageError("augment: image and mask dimensions differ");
    if (flips) {
        bool h = rng.bernoulli(0.5);
        bool v = rng.bernoulli(0.5);
        if (h) {
            img = flip_h(img);
            mask = flip_h(mask);
        }
        if (v) {
            img = flip_v(img);
            mask = flip_v(mask);
        }
    }
    if (rot90) {
        int k = static_cast<int>(rng.int_range(0, 3));
        if (k != 0) {
            img = rot90k(img, k);
            mask = rot90k(mask, k);
        }
    }
    if (photometric) {
        double contrast = rng.uniform(0.9, 1.1);
        double brightness = rng.uniform(-0.1, 0.1) * 255.0;
        for (auto& p : img.pixels) {
            double v = contrast * (static_cast<double>(p) - 127.5) + 127.5 + brightness;
            p = static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
        }
    }
}

void sgd_step(SegModel& model, std::vector<std::vector<float>>& velocity, double lr,
              double momentum, double weight_decay) {
    auto& params = model.params();
    if (velocity.empty()) {
        velocity.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i)
            velocity[i].assign(params[i].w.size(), 0.f);
    }
    if (velocity.size() != params.size())
        throw UsageError("sgd_step: velocity buffer count does not match parameter count");
    const float m = static_cast<float>(momentum);
    const float wd = static_cast<float>(weight_decay);
    const float eta = static_cast<float>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& v = velocity[i];
        if (v.size() != p.w.size())
            throw UsageError("sgd_step: velocity size mismatch for " + p.name);
        for (size_t j = 0; j < v.size(); ++j) {
            float g = p.g[j] + wd * p.w[j];
            v[j] = m * v[j] + g;
            p.w[j] -= eta * v[j];
        }
    }
}

std::vector<Sample> load_split_samples(const MosaicManifest& m, SplitTag tag) {
    std::vector<Sample> out;
    for (const auto& [coord, entry] : m.entries) {
        if (entry.split != tag || !entry.annotated) continue;
        Sample s;
        s.image = read_patch(m, coord.ix, coord.iy);
        s.label = read_label(m, coord.ix, coord.iy);
        if (s.image.width != s.label.width || s.image.height != s.label.height)
            throw DataError("patch (" + std::to_string(coord.ix) + ", " + std::to_string(coord.iy) +
                            "): image and label dimensions differ");
        out.push_back(std::move(s));
    }
    return out;
}

double validation_miou(const SegModel& model, const std::vector<Sample>& samples, float threshold) {
    const int s = model.config().input_px;
    const size_t plane = static_cast<size_t>(s) * s;
    std::vector<float> gray(plane);
    std::vector<float> probs;
    IoUCounts total;
    for (const auto& sample : samples) {
        if (sample.image.width != s || sample.image.height != s)
            throw DataError("validation sample is " + std::to_string(sample.image.width) + "x" +
                            std::to_string(sample.image.height) + ", model expects " +
                            std::to_string(s));
        for (size_t i = 0; i < plane; ++i)
            gray[i] = static_cast<float>(sample.image.pixels[i]) / 255.f;
        model.predict(gray.data(), 1, probs);
        ClassMask pred = to_class_mask(probs, s, s, threshold);
        total += overlap_counts(pred, sample.label);
    }
    return report_from_counts(total, "val").miou;
}

namespace {

void check_samples(const std::vector<Sample>& set, const char* which, int input_px) {
    for (size_t i = 0; i < set.size(); ++i) {
        if (set[i].image.width != input_px || set[i].image.height != input_px ||
            set[i].label.width != input_px || set[i].label.height != input_px)
            throw DataError(std::string(which) + " sample " + std::to_string(i) + " is " +
                            std::to_string(set[i].image.width) + "x" +
                            std::to_string(set[i].image.height) + ", model expects " +
                            std::to_string(input_px) + "x" + std::to_string(input_px));
    }
}

} // namespace

TrainState train_loop(SegModel& model, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& val_set, const TrainConfig& cfg,
                      const std::filesystem::path& out_dir, std::ostream* log,
                      const TrainState* resume, int64_t max_steps_this_run) {
    cfg.validate();
    if (train_set.empty()) throw DataError("train_loop: training set is empty");
    const int s = model.config().input_px;
    check_samples(train_set, "train", s);
    check_samples(val_set, "val", s);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw RuntimeFailure("cannot create " + out_dir.string() + ": " + ec.message());

    TrainState st;
    Rng rng(Rng::derive_seed(cfg.seed, 0x7472ull));
    if (resume) {
        st = *resume;
        if (st.step < 0 || st.step > cfg.total_steps)
            throw UsageError("resume state at step " + std::to_string(st.step) +
                             " is outside the schedule");
        if (!st.rng_state.empty()) rng.deserialize(st.rng_state);
    }

    int64_t end_step = cfg.total_steps;
    if (max_steps_this_run >= 0) end_step = std::min(end_step, st.step + max_steps_this_run);

    const size_t plane = static_cast<size_t>(s) * s;
    const int b = cfg.batch_size;
    std::vector<float> gray(static_cast<size_t>(b) * plane);
    std::vector<uint8_t> targets(static_cast<size_t>(b) * plane);
    std::vector<int64_t> batch_ids(b);
    int64_t last_saved = -1;

    while (st.step < end_step) {
        const int64_t k = st.step + 1;
        const double lr = lr_at(cfg, k);
        for (int bi = 0; bi < b; ++bi) {
            int64_t idx = rng.int_range(0, static_cast<int64_t>(train_set.size()) - 1);
            batch_ids[bi] = idx;
            Image8 img = train_set[static_cast<size_t>(idx)].image;
            ClassMask lab = train_set[static_cast<size_t>(idx)].label;
            augment(img, lab, cfg.augment_flips, cfg.augment_rot90, cfg.augment_photometric, rng);
            float* g = gray.data() + static_cast<size_t>(bi) * plane;
            for (size_t i = 0; i < plane; ++i)
                g[i] = static_cast<float>(img.pixels[i]) / 255.f;
            std::copy(lab.values.begin(), lab.values.end(),
                      targets.begin() + static_cast<size_t>(bi) * plane);
        }
        model.zero_grad();
        double loss = model.forward_backward(gray.data(), targets.data(), b, kBceEps);
        if (!std::isfinite(loss)) {
            std::string ids;
            for (int bi = 0; bi < b; ++bi) ids += (bi ? ", " : "") + std::to_string(batch_ids[bi]);
            throw RuntimeFailure("non-finite loss at step " + std::to_string(k) + " (lr " +
                                 fmt_g(lr) + ", batch [" + ids + "])");
        }
        sgd_step(model, st.velocity, lr, cfg.momentum, cfg.weight_decay);
        st.step = k;

        const bool eval = (k % cfg.checkpoint_every == 0) || k == cfg.total_steps;
        double vm = -1.0;
        if (eval && !val_set.empty()) {
            vm = validation_miou(model, val_set, cfg.threshold);
            if (vm > st.best_miou) {
                st.best_miou = vm;
                st.best_step = k;
                nlohmann::ordered_json extra;
                extra["step"] = k;
                extra["val_miou"] = vm;
                save_snapshot(model, out_dir / "best.ckpt", extra.dump());
            }
        }
        if (eval) {
            st.rng_state = rng.serialize();
            save_train_state(model, st, out_dir / "last.ckpt");
            last_saved = k;
        }
        if (log) {
            char vbuf[40] = "-";
            if (vm >= 0.0) std::snprintf(vbuf, sizeof vbuf, "%.6f", vm);
            (*log) << k << '\t' << fmt_g(lr) << '\t' << fmt_g(loss) << '\t' << vbuf << '\n';
        }
    }

    st.rng_state = rng.serialize();
    if (last_saved != st.step) save_train_state(model, st, out_dir / "last.ckpt");
    return st;
}

void save_train_state(const SegModel& model, const TrainState& state,
                      const std::filesystem::path& path) {
    Checkpoint ck;
    nlohmann::ordered_json meta;
    meta["kind"] = "train-state";
    meta["config"] = nlohmann::ordered_json::parse(model.config().to_json());
    meta["step"] = state.step;
    meta["best_miou"] = state.best_miou;
    meta["best_step"] = state.best_step;
    meta["rng"] = state.rng_state;
    ck.meta_json = meta.dump();
    const auto& params = const_cast<SegModel&>(model).params();
    if (!state.velocity.empty() && state.velocity.size() != params.size())
        throw UsageError("save_train_state: velocity buffer count does not match parameter count");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        Tensor& t = ck.add(p.name, p.dims);
        std::copy(p.w.begin(), p.w.end(), t.values.begin());
        Tensor& v = ck.add("opt.m." + p.name, p.dims);
        if (!state.velocity.empty()) {
            if (state.velocity[i].size() != p.w.size())
                throw UsageError("save_train_state: velocity size mismatch for " + p.name);
            std::copy(state.velocity[i].begin(), state.velocity[i].end(), v.values.begin());
        }
    }
    save_checkpoint(ck, path);
}

std::pair<SegModel, TrainState> load_train_state(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(ck.meta_json);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": meta is not valid json: " + e.what());
    }
    if (!meta.is_object() || meta.value("kind", "") != std::string("train-state"))
        throw DataError(path.string() + ": not a train state (kind != \"train-state\")");
    if (!meta.contains("config")) throw DataError(path.string() + ": meta lacks \"config\"");
    EncoderConfig cfg = EncoderConfig::from_json(meta["config"].dump());
    for (const char* key : {"step", "best_miou", "best_step", "rng"})
        if (!meta.contains(key))
            throw DataError(path.string() + ": meta lacks \"" + std::string(key) + "\"");

    SegModel model(cfg, 0);
    TrainState st;
    st.step = meta["step"].get<int64_t>();
    st.best_miou = meta["best_miou"].get<double>();
    st.best_step = meta["best_step"].get<int64_t>();
    st.rng_state = meta["rng"].get<std::string>();
    auto& params = model.params();
    st.velocity.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        for (const std::string prefix : {std::string(), std::string("opt.m.")}) {
            const std::string name = prefix + p.name;
            const Tensor* t = ck.find(name);
            if (!t) throw DataError(path.string() + ": missing tensor " + name);
            if (t->dims != p.dims)
                throw DataError(path.string() + ": tensor " + name + " has mismatched shape");
            if (prefix.empty())
                std::copy(t->values.begin(), t->values.end(), p.w.begin());
            else
                st.velocity[i].assign(t->values.begin(), t->values.end());
        }
    }
    return {std::move(model), std::move(st)};
}

} // namespace callosum
