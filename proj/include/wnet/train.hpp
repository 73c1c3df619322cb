#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wnet/data.hpp"
#include "wnet/eval.hpp"
#include "wnet/loss.hpp"
#include "wnet/model.hpp"
#include "wnet/preprocess.hpp"

namespace wnet {

// ---- run configuration ----

struct RunConfig {
    Arch arch = Arch::WNet;
    Task task = Task::Both;
    std::int64_t input_size = 576;
    int epochs = 1000;
    int batch_size = 2;
    double lr = 0.0005;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double omega = 0.6;
    double lambda_od = 0.7;
    double lambda_ex = 0.9;
    bool auto_balance = false;
    double bg_loss_scale = 0.0;
    LossReduction reduction = LossReduction::ImageSum;
    std::uint64_t seed = 42;
    int fold_count = 5;
    double leaky_slope = 0.01;
    double dropout_rate = 0.2;
    bool normalization = true;
    bool augment = true;
    bool aug_rotate = true;
    bool aug_hflip = true;
    bool aug_vflip = true;
    double aug_intensity_lo = 0.8;
    double aug_intensity_hi = 1.2;
    int eval_every = 1;
    bool enhance_input = true;
    double sigma = 0.2;       // lesion-level overlap factor
    float threshold = 0.5f;   // probability cut for masks
};

inline void validate_config(const RunConfig& c) {
    if (c.input_size <= 0 || c.input_size % 8 != 0)
        throw std::invalid_argument("config: input_size must be a positive multiple of 8");
    if (c.epochs <= 0 || c.batch_size <= 0 || c.fold_count <= 0 || c.eval_every <= 0)
        throw std::invalid_argument("config: counts must be positive");
    if (c.lr <= 0) throw std::invalid_argument("config: lr must be positive");
    if (!(c.omega >= 0 && c.omega <= 1))
        throw std::invalid_argument("config: omega must be in [0,1]");
    if (!(c.lambda_od > 0 && c.lambda_od < 1) || !(c.lambda_ex > 0 && c.lambda_ex < 1))
        throw std::invalid_argument("config: lambda weights must be in (0,1)");
    if (c.arch == Arch::WNet && c.task != Task::Both)
        throw std::invalid_argument("config: wnet trains both tasks");
    if (c.arch != Arch::WNet && c.task == Task::Both)
        throw std::invalid_argument("config: single-decoder arch needs task od or ex");
    if (!(c.sigma > 0 && c.sigma <= 1))
        throw std::invalid_argument("config: sigma must be in (0,1]");
}

inline ModelSpec spec_from_config(const RunConfig& c) {
    ModelSpec spec;
    spec.arch = c.arch;
    spec.input_size = c.input_size;
    spec.leaky_slope = c.leaky_slope;
    spec.dropout_rate = c.dropout_rate;
    spec.normalization = c.normalization;
    return spec;
}

inline std::string config_to_text(const RunConfig& c) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "arch = " << arch_name(c.arch) << "\n";
    os << "task = " << task_name(c.task) << "\n";
    os << "input_size = " << c.input_size << "\n";
    os << "epochs = " << c.epochs << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "lr = " << c.lr << "\n";
    os << "beta1 = " << c.beta1 << "\n";
    os << "beta2 = " << c.beta2 << "\n";
    os << "adam_eps = " << c.adam_eps << "\n";
    os << "omega = " << c.omega << "\n";
    os << "lambda_od = " << c.lambda_od << "\n";
    os << "lambda_ex = " << c.lambda_ex << "\n";
    os << "auto_balance = " << (c.auto_balance ? "true" : "false") << "\n";
    os << "bg_loss_scale = " << c.bg_loss_scale << "\n";
    os << "reduction = "
       << (c.reduction == LossReduction::ImageSum ? "image_sum" : "pixel_mean") << "\n";
    os << "seed = " << c.seed << "\n";
    os << "fold_count = " << c.fold_count << "\n";
    os << "leaky_slope = " << c.leaky_slope << "\n";
    os << "dropout_rate = " << c.dropout_rate << "\n";
    os << "normalization = " << (c.normalization ? "true" : "false") << "\n";
    os << "augment = " << (c.augment ? "true" : "false") << "\n";
    os << "aug_rotate = " << (c.aug_rotate ? "true" : "false") << "\n";
    os << "aug_hflip = " << (c.aug_hflip ? "true" : "false") << "\n";
    os << "aug_vflip = " << (c.aug_vflip ? "true" : "false") << "\n";
    os << "aug_intensity_lo = " << c.aug_intensity_lo << "\n";
    os << "aug_intensity_hi = " << c.aug_intensity_hi << "\n";
    os << "eval_every = " << c.eval_every << "\n";
    os << "enhance_input = " << (c.enhance_input ? "true" : "false") << "\n";
    os << "sigma = " << c.sigma << "\n";
    os << "threshold = " << c.threshold << "\n";
    return os.str();
}

inline RunConfig config_from_text(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    int row = 0;
    auto to_bool = [](const std::string& v, int row) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("config line " + std::to_string(row) +
                                    ": expected boolean, got '" + v + "'");
    };
    while (std::getline(is, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t");
            return s.substr(a, b - a + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(row) +
                                        ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "arch") c.arch = arch_from_name(val);
            else if (key == "task") c.task = task_from_name(val);
            else if (key == "input_size") c.input_size = std::stoll(val);
            else if (key == "epochs") c.epochs = std::stoi(val);
            else if (key == "batch_size") c.batch_size = std::stoi(val);
            else if (key == "lr") c.lr = std::stod(val);
            else if (key == "beta1") c.beta1 = std::stod(val);
            else if (key == "beta2") c.beta2 = std::stod(val);
            else if (key == "adam_eps") c.adam_eps = std::stod(val);
            else if (key == "omega") c.omega = std::stod(val);
            else if (key == "lambda_od") c.lambda_od = std::stod(val);
            else if (key == "lambda_ex") c.lambda_ex = std::stod(val);
            else if (key == "auto_balance") c.auto_balance = to_bool(val, row);
            else if (key == "bg_loss_scale") c.bg_loss_scale = std::stod(val);
            else if (key == "reduction") {
                if (val == "image_sum") c.reduction = LossReduction::ImageSum;
                else if (val == "pixel_mean") c.reduction = LossReduction::PixelMean;
                else throw std::invalid_argument("unknown reduction '" + val + "'");
            }
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "fold_count") c.fold_count = std::stoi(val);
            else if (key == "leaky_slope") c.leaky_slope = std::stod(val);
            else if (key == "dropout_rate") c.dropout_rate = std::stod(val);
            else if (key == "normalization") c.normalization = to_bool(val, row);
            else if (key == "augment") c.augment = to_bool(val, row);
            else if (key == "aug_rotate") c.aug_rotate = to_bool(val, row);
            else if (key == "aug_hflip") c.aug_hflip = to_bool(val, row);
            else if (key == "aug_vflip") c.aug_vflip = to_bool(val, row);
            else if (key == "aug_intensity_lo") c.aug_intensity_lo = std::stod(val);
            else if (key == "aug_intensity_hi") c.aug_intensity_hi = std::stod(val);
            else if (key == "eval_every") c.eval_every = std::stoi(val);
            else if (key == "enhance_input") c.enhance_input = to_bool(val, row);
            else if (key == "sigma") c.sigma = std::stod(val);
            else if (key == "threshold") c.threshold = std::stof(val);
            else
                throw std::invalid_argument("unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception&) {
            throw std::invalid_argument("config line " + std::to_string(row) +
                                        ": bad value for '" + key + "'");
        }
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return config_from_text(buf.str());
}

inline std::string config_hash(const RunConfig& c) {
    const std::string text = config_to_text(c);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    std::uint64_t h = a * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull;
    h ^= b + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= c + 0x94d049bb133111ebull + (h << 6) + (h >> 2);
    return h;
}

// ---- cross-validation folds ----

struct FoldPlan {
    int fold_count = 0;
    std::map<std::string, int> assignment;

    std::vector<std::string> ids_in_fold(int fold) const {
        std::vector<std::string> out;
        for (const auto& [id, f] : assignment)
            if (f == fold) out.push_back(id);
        return out;
    }
};

// Shuffled partition into k near-equal folds, deterministic in
// (seed, sorted ids).
inline FoldPlan make_folds(std::vector<std::string> ids, int k, std::uint64_t seed) {
    if (static_cast<int>(ids.size()) < k)
        throw std::invalid_argument("make_folds: " + std::to_string(ids.size()) +
                                    " ids for " + std::to_string(k) + " folds");
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    FoldPlan plan;
    plan.fold_count = k;
    for (std::size_t i = 0; i < ids.size(); ++i)
        plan.assignment[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
    return plan;
}

// ---- Adam ----

template <typename T>
struct AdamState {
    std::int64_t step = 0;
    NamedTensors<T> m, v;
};

// One bias-corrected Adam step over every grad-carrying parameter. Moments
// are created on first use and updated in place.
template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, T lr, T beta1, T beta2,
               T eps) {
    ++state.step;
    const T bc1 = T{1} - static_cast<T>(std::pow(static_cast<double>(beta1),
                                                 static_cast<double>(state.step)));
    const T bc2 = T{1} - static_cast<T>(std::pow(static_cast<double>(beta2),
                                                 static_cast<double>(state.step)));
    for (auto& [name, p] : params.tensors) {
        if (!p.requires_grad()) continue;
        auto mit = state.m.find(name);
        if (mit == state.m.end()) {
            mit = state.m.emplace(name, Tensor<T>::zeros(p.shape())).first;
            state.v.emplace(name, Tensor<T>::zeros(p.shape()));
        }
        auto& m = mit->second;
        auto& v = state.v.at(name);
        if (!m.same_shape(p))
            throw std::invalid_argument("adam_step: state shape " + shape_str(m.shape()) +
                                        " does not match param " + shape_str(p.shape()));
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const T g = p.grad()[i];
            m.data()[i] = beta1 * m.data()[i] + (T{1} - beta1) * g;
            v.data()[i] = beta2 * v.data()[i] + (T{1} - beta2) * g * g;
            const T mhat = m.data()[i] / bc1;
            const T vhat = v.data()[i] / bc2;
            p.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

template <typename T>
void save_adam_state(const std::string& path, const AdamState<T>& state) {
    NamedTensors<T> entries;
    for (const auto& [name, t] : state.m) entries.emplace(name + ".m", t);
    for (const auto& [name, t] : state.v) entries.emplace(name + ".v", t);
    entries.emplace("__step", Tensor<T>::scalar(static_cast<T>(state.step)));
    save_tensors(path, entries, "{\"kind\":\"adam_state\"}");
}

template <typename T>
AdamState<T> load_adam_state(const std::string& path) {
    AdamState<T> state;
    auto entries = load_tensors<T>(path);
    for (auto& [name, t] : entries) {
        if (name == "__step")
            state.step = static_cast<std::int64_t>(t.item());
        else if (name.size() > 2 && name.substr(name.size() - 2) == ".m")
            state.m.emplace(name.substr(0, name.size() - 2), t);
        else if (name.size() > 2 && name.substr(name.size() - 2) == ".v")
            state.v.emplace(name.substr(0, name.size() - 2), t);
    }
    return state;
}

// ---- preparation shared by train and eval ----

// Geometric normalization plus optional contrast enhancement; this is the
// deterministic part of the pipeline, done once per record.
inline std::vector<ImageRecord> prepare_records(const std::vector<ImageRecord>& records,
                                                const RunConfig& config) {
    std::vector<ImageRecord> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        auto p = resize_or_pad(r, config.input_size);
        if (config.enhance_input) p.rgb = enhance(p.rgb);
        out.push_back(std::move(p));
    }
    return out;
}

template <typename T>
Tensor<T> to_network_input(const Tensor<float>& rgb) {
    auto std_rgb = standardize(rgb);
    Tensor<T> out = Tensor<T>::zeros({1, 3, std_rgb.dim(1), std_rgb.dim(2)});
    for (std::int64_t i = 0; i < std_rgb.numel(); ++i)
        out.data()[i] = static_cast<T>(std_rgb.data()[i]);
    return out;
}

// ---- evaluation over a record list ----

template <typename T>
EvalReport evaluate_records(const ModelSpec& spec, ModelParams<T>& params,
                            const std::vector<ImageRecord>& prepared, Task task,
                            double sigma, float threshold, int fold_id = -1,
                            bool with_pr = true) {
    EvalReport report;
    report.fold = fold_id;
    std::vector<float> od_pool_probs, ex_pool_probs;
    std::vector<std::uint8_t> od_pool_gt, ex_pool_gt;
    PixelCounts od_pix, ex_pix;
    LesionCounts od_les, ex_les;
    double eta_sum = 0;
    std::int64_t eta_count = 0;

    std::mt19937_64 rng(0);
    for (const auto& rec : prepared) {
        auto x = to_network_input<T>(rec.rgb);
        auto heads = forward(spec, params, x, /*training=*/false, rng);
        ImageEval ie;
        ie.id = rec.id;
        auto eval_task = [&](const Tensor<T>& head, const Tensor<float>& gt_mask,
                             bool is_od) {
            auto probs_t = slice_channel(head, 1);
            Tensor<float> probs = Tensor<float>::zeros({gt_mask.dim(0), gt_mask.dim(1)});
            for (std::int64_t i = 0; i < probs.numel(); ++i)
                probs.data()[i] = static_cast<float>(probs_t.data()[i]);
            Tensor<float> mask = Tensor<float>::zeros(probs.shape());
            for (std::int64_t i = 0; i < probs.numel(); ++i)
                mask.data()[i] = probs.data()[i] >= threshold ? 1.0f : 0.0f;

            TaskMetrics m;
            m.pixel = pixel_counts(mask, gt_mask);
            m.rates = pixel_rates(m.pixel);
            m.lesion = lesion_match(connected_components(mask),
                                    connected_components(gt_mask), sigma);
            m.lesion_rate = lesion_rates(m.lesion);
            bool gt_nonempty = false;
            for (float v : gt_mask.data()) gt_nonempty = gt_nonempty || v == 1.0f;
            if (is_od && gt_nonempty) {
                m.eta = (m.pixel.tp + m.pixel.fp + m.pixel.fn) == 0
                            ? 1.0
                            : overlap_eta(mask, gt_mask);
                eta_sum += *m.eta;
                ++eta_count;
            }
            if (with_pr && gt_nonempty) m.auc = pr_curve(probs, gt_mask).auc;
            auto& pool_probs = is_od ? od_pool_probs : ex_pool_probs;
            auto& pool_gt = is_od ? od_pool_gt : ex_pool_gt;
            if (with_pr) {
                pool_probs.insert(pool_probs.end(), probs.data().begin(), probs.data().end());
                for (float v : gt_mask.data()) pool_gt.push_back(v == 1.0f ? 1 : 0);
            }
            (is_od ? od_pix : ex_pix) += m.pixel;
            (is_od ? od_les : ex_les) += m.lesion;
            return m;
        };
        if (spec.heads() == 2) {
            ie.od = eval_task(heads[0], rec.od_mask, true);
            ie.ex = eval_task(heads[1], rec.ex_mask, false);
        } else if (task == Task::OD) {
            ie.od = eval_task(heads[0], rec.od_mask, true);
        } else {
            ie.ex = eval_task(heads[0], rec.ex_mask, false);
        }
        report.images.push_back(std::move(ie));
    }

    auto aggregate = [&](const PixelCounts& pix, const LesionCounts& les,
                         std::vector<float>& probs, std::vector<std::uint8_t>& gt,
                         bool is_od) {
        TaskMetrics m;
        m.pixel = pix;
        m.rates = pixel_rates(pix);
        m.lesion = les;
        m.lesion_rate = lesion_rates(les);
        if (is_od && eta_count > 0) m.eta = eta_sum / static_cast<double>(eta_count);
        std::optional<PrCurve> curve;
        if (with_pr) {
            bool any_pos = false;
            for (auto g : gt) any_pos = any_pos || g;
            if (any_pos) {
                curve = pr_curve(probs, gt, default_thresholds(probs));
                m.auc = curve->auc;
            }
        }
        return std::pair{m, curve};
    };
    if (task != Task::EX) {
        auto [m, curve] = aggregate(od_pix, od_les, od_pool_probs, od_pool_gt, true);
        report.od = m;
        report.od_pr = curve;
    }
    if (task != Task::OD) {
        auto [m, curve] = aggregate(ex_pix, ex_les, ex_pool_probs, ex_pool_gt, false);
        report.ex = m;
        report.ex_pr = curve;
    }
    return report;
}

// ---- training ----

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double od_f1 = std::numeric_limits<double>::quiet_NaN();
    double ex_f1 = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
struct TrainResult {
    ModelSpec spec;
    ModelParams<T> final_params;
    ModelParams<T> best_params;
    int best_epoch = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<EpochStats> trace;
    std::vector<std::string> train_ids, heldout_ids;
};

namespace detail {

template <typename T>
double heldout_pixel_f1(const ModelSpec& spec, ModelParams<T>& params,
                        const std::vector<const ImageRecord*>& records, bool od_head,
                        Task task, float threshold) {
    PixelCounts counts;
    std::mt19937_64 rng(0);
    for (const auto* rec : records) {
        auto x = to_network_input<T>(rec->rgb);
        auto heads = forward(spec, params, x, false, rng);
        const Tensor<T>* head = nullptr;
        const Tensor<float>* gt = nullptr;
        if (spec.heads() == 2) {
            head = od_head ? &heads[0] : &heads[1];
            gt = od_head ? &rec->od_mask : &rec->ex_mask;
        } else {
            head = &heads[0];
            gt = task == Task::OD ? &rec->od_mask : &rec->ex_mask;
        }
        auto probs = slice_channel(*head, 1);
        for (std::int64_t i = 0; i < probs.numel(); ++i) {
            const bool p = static_cast<float>(probs.data()[i]) >= threshold;
            const bool g = gt->data()[i] == 1.0f;
            if (p && g) ++counts.tp;
            else if (p && !g) ++counts.fp;
            else if (!p && g) ++counts.fn;
            else ++counts.tn;
        }
    }
    return pixel_rates(counts).f1;
}

}  // namespace detail

// Trains on every fold except `fold_index` (pass -1 to train on the whole
// dataset; the trace then reports training-set F1). Deterministic in
// (config, dataset, seed): epoch shuffles, augmentation draws and dropout
// masks are all derived from the config seed.
template <typename T = float>
TrainResult<T> train(const RunConfig& config, const std::vector<ImageRecord>& dataset,
                     const FoldPlan& folds, int fold_index,
                     const std::function<void(const EpochStats&)>& on_epoch = {}) {
    validate_config(config);
    const ModelSpec spec = spec_from_config(config);

    // mask availability check up front
    std::vector<std::string> missing;
    for (const auto& rec : dataset) {
        const bool need_od = config.task != Task::EX;
        const bool need_ex = config.task != Task::OD;
        if ((need_od && !rec.has_od()) || (need_ex && !rec.has_ex()))
            missing.push_back(rec.id);
    }
    if (!missing.empty()) {
        std::string msg = "train: records missing required masks:";
        for (const auto& id : missing) msg += " " + id;
        throw std::invalid_argument(msg);
    }

    auto prepared = prepare_records(dataset, config);
    std::sort(prepared.begin(), prepared.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });

    TrainResult<T> result;
    result.spec = spec;
    std::vector<const ImageRecord*> train_set, heldout_set;
    for (const auto& rec : prepared) {
        int fold = -2;
        if (fold_index >= 0) {
            auto it = folds.assignment.find(rec.id);
            if (it == folds.assignment.end())
                throw std::invalid_argument("train: record '" + rec.id +
                                            "' missing from fold plan");
            fold = it->second;
        }
        if (fold == fold_index) {
            heldout_set.push_back(&rec);
            result.heldout_ids.push_back(rec.id);
        } else {
            train_set.push_back(&rec);
            result.train_ids.push_back(rec.id);
        }
    }
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    const auto& eval_set = heldout_set.empty() ? train_set : heldout_set;

    std::mt19937_64 init_rng(config.seed);
    auto params = build_model<T>(spec, init_rng);
    AdamState<T> adam;

    AugmentationPolicy policy;
    policy.rotate = config.aug_rotate;
    policy.hflip = config.aug_hflip;
    policy.vflip = config.aug_vflip;
    policy.intensity_lo = config.aug_intensity_lo;
    policy.intensity_hi = config.aug_intensity_hi;

    const bool need_od = config.task != Task::EX;
    const bool need_ex = config.task != Task::OD;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0u);
        std::mt19937_64 shuffle_rng(
            mix_seed(config.seed, 0x51u11eull, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0;
        int steps = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t bsz =
                std::min<std::size_t>(static_cast<std::size_t>(config.batch_size),
                                      order.size() - start);
            Tensor<T> batch = Tensor<T>::zeros(
                {static_cast<std::int64_t>(bsz), 3, spec.input_size, spec.input_size});
            Tensor<T> od_labels, ex_labels;
            if (need_od)
                od_labels = Tensor<T>::zeros(
                    {static_cast<std::int64_t>(bsz), spec.input_size, spec.input_size});
            if (need_ex)
                ex_labels = Tensor<T>::zeros(
                    {static_cast<std::int64_t>(bsz), spec.input_size, spec.input_size});

            for (std::size_t b = 0; b < bsz; ++b) {
                const ImageRecord* rec = train_set[order[start + b]];
                ImageRecord aug;
                if (config.augment) {
                    auto rng = record_rng(config.seed, rec->id, epoch);
                    aug = augment(*rec, policy, rng);
                } else {
                    aug = *rec;
                }
                auto x = to_network_input<T>(aug.rgb);
                std::copy(x.data().begin(), x.data().end(),
                          batch.data().begin() +
                              static_cast<std::int64_t>(b) * 3 * spec.input_size *
                                  spec.input_size);
                const std::int64_t hw = spec.input_size * spec.input_size;
                if (need_od)
                    for (std::int64_t i = 0; i < hw; ++i)
                        od_labels.data()[static_cast<std::int64_t>(b) * hw + i] =
                            static_cast<T>(aug.od_mask.data()[i]);
                if (need_ex)
                    for (std::int64_t i = 0; i < hw; ++i)
                        ex_labels.data()[static_cast<std::int64_t>(b) * hw + i] =
                            static_cast<T>(aug.ex_mask.data()[i]);
            }

            Tape<T> tape;
            std::mt19937_64 drop_rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch),
                                              0xd09full + static_cast<std::uint64_t>(steps)));
            auto heads = forward(spec, params, batch, /*training=*/true, drop_rng, &tape);

            auto task_loss = [&](const Tensor<T>& head, const Tensor<T>& labels,
                                 double lambda) {
                T lam = static_cast<T>(lambda);
                if (config.auto_balance)
                    lam = static_cast<T>(
                        std::clamp(auto_balance_lambda(labels), 1e-3, 1.0 - 1e-3));
                auto fg = slice_channel(head, 1, &tape);
                auto loss = class_balanced_bce(fg, labels, lam, &tape, config.reduction);
                if (config.bg_loss_scale > 0) {
                    auto bg = slice_channel(head, 0, &tape);
                    Tensor<T> inv = Tensor<T>::zeros(labels.shape());
                    for (std::int64_t i = 0; i < labels.numel(); ++i)
                        inv.data()[i] = T{1} - labels.data()[i];
                    auto bg_loss = class_balanced_bce(bg, inv, T{1} - lam, &tape,
                                                      config.reduction);
                    loss = add(loss, scale(bg_loss, static_cast<T>(config.bg_loss_scale),
                                           &tape), &tape);
                }
                return loss;
            };

            Tensor<T> loss;
            if (spec.heads() == 2) {
                auto od_loss = task_loss(heads[0], od_labels, config.lambda_od);
                auto ex_loss = task_loss(heads[1], ex_labels, config.lambda_ex);
                loss = total_loss(ex_loss, od_loss, static_cast<T>(config.omega), &tape);
            } else if (config.task == Task::OD) {
                loss = task_loss(heads[0], od_labels, config.lambda_od);
            } else {
                loss = task_loss(heads[0], ex_labels, config.lambda_ex);
            }

            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value))
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + " step " +
                                         std::to_string(steps));
            backward(loss, tape);
            adam_step(params, adam, static_cast<T>(config.lr),
                      static_cast<T>(config.beta1), static_cast<T>(config.beta2),
                      static_cast<T>(config.adam_eps));
            for (auto& [name, t] : params.tensors)
                if (t.requires_grad()) t.zero_grad();
            loss_sum += loss_value;
            ++steps;
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / std::max(1, steps);
        if (epoch % config.eval_every == 0 || epoch == config.epochs) {
            if (need_od)
                stats.od_f1 = detail::heldout_pixel_f1(spec, params, eval_set, true,
                                                       config.task, config.threshold);
            if (need_ex)
                stats.ex_f1 = detail::heldout_pixel_f1(spec, params, eval_set, false,
                                                       config.task, config.threshold);
            double score = 0;
            int nscore = 0;
            if (need_od && std::isfinite(stats.od_f1)) { score += stats.od_f1; ++nscore; }
            if (need_ex && std::isfinite(stats.ex_f1)) { score += stats.ex_f1; ++nscore; }
            if (nscore > 0) score /= nscore;
            if (score > result.best_score) {
                result.best_score = score;
                result.best_epoch = epoch;
                result.best_params = params.clone();
            }
        }
        result.trace.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }

    result.final_params = std::move(params);
    if (result.best_epoch < 0) {
        result.best_params = result.final_params.clone();
        result.best_epoch = config.epochs;
    }
    result.spec = spec;
    return result;
}

// ---- cross-validation and the omega sweep ----

struct CvFold {
    int fold = 0;
    EvalReport report;
    std::vector<EpochStats> trace;
};

struct CvResult {
    std::vector<CvFold> folds;
    double mean_od_pixel_f1 = std::numeric_limits<double>::quiet_NaN();
    double mean_ex_lesion_f1 = std::numeric_limits<double>::quiet_NaN();
    double mean_od_eta = std::numeric_limits<double>::quiet_NaN();
};

template <typename T = float>
CvResult cross_validate(const RunConfig& config, const std::vector<ImageRecord>& dataset,
                        const std::function<void(int, const EpochStats&)>& on_epoch = {}) {
    validate_config(config);
    std::vector<std::string> ids;
    for (const auto& r : dataset) ids.push_back(r.id);
    auto folds = make_folds(ids, config.fold_count, config.seed);

    CvResult cv;
    double od_sum = 0, ex_sum = 0, eta_sum = 0;
    int od_n = 0, ex_n = 0, eta_n = 0;
    for (int f = 0; f < config.fold_count; ++f) {
        auto cb = on_epoch ? std::function<void(const EpochStats&)>(
                                 [&, f](const EpochStats& s) { on_epoch(f, s); })
                           : std::function<void(const EpochStats&)>();
        auto tr = train<T>(config, dataset, folds, f, cb);
        std::vector<ImageRecord> heldout;
        auto prepared = prepare_records(dataset, config);
        for (const auto& rec : prepared)
            if (folds.assignment.at(rec.id) == f) heldout.push_back(rec);
        auto report = evaluate_records(tr.spec, tr.best_params, heldout, config.task,
                                       config.sigma, config.threshold, f);
        if (report.od) {
            od_sum += report.od->rates.f1;
            ++od_n;
            if (report.od->eta) { eta_sum += *report.od->eta; ++eta_n; }
        }
        if (report.ex) {
            ex_sum += report.ex->lesion_rate.f1;
            ++ex_n;
        }
        cv.folds.push_back({f, std::move(report), std::move(tr.trace)});
    }
    if (od_n) cv.mean_od_pixel_f1 = od_sum / od_n;
    if (ex_n) cv.mean_ex_lesion_f1 = ex_sum / ex_n;
    if (eta_n) cv.mean_od_eta = eta_sum / eta_n;
    return cv;
}

struct SweepRow {
    double omega = 0;
    double od_f1 = std::numeric_limits<double>::quiet_NaN();   // pixel level
    double ex_f1 = std::numeric_limits<double>::quiet_NaN();   // lesion level
};

// One cross-validated run per grid point; rows come back sorted by omega.
template <typename T = float>
std::vector<SweepRow> sweep_omega(const RunConfig& config,
                                  const std::vector<ImageRecord>& dataset,
                                  std::vector<double> grid,
                                  const std::function<void(const SweepRow&)>& on_row = {}) {
    if (grid.empty()) throw std::invalid_argument("sweep_omega: empty grid");
    std::sort(grid.begin(), grid.end());
    for (double w : grid)
        if (!(w >= 0.0 && w <= 1.0))
            throw std::invalid_argument("sweep_omega: omega grid must lie in [0,1]");
    std::vector<SweepRow> rows;
    for (double w : grid) {
        RunConfig c = config;
        c.omega = w;
        auto cv = cross_validate<T>(c, dataset);
        SweepRow row{w, cv.mean_od_pixel_f1, cv.mean_ex_lesion_f1};
        rows.push_back(row);
        if (on_row) on_row(row);
    }
    return rows;
}

}  // namespace wnet
