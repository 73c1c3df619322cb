#pragma once

#include <chrono>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "wnet/checkpoint.hpp"
#include "wnet/nn_ops.hpp"
#include "wnet/preprocess.hpp"
#include "wnet/tensor.hpp"

namespace wnet {

enum class Arch { UNet, SNet, WNet };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::UNet: return "unet";
        case Arch::SNet: return "snet";
        default: return "wnet";
    }
}

inline Arch arch_from_name(const std::string& s) {
    if (s == "unet") return Arch::UNet;
    if (s == "snet") return Arch::SNet;
    if (s == "wnet") return Arch::WNet;
    throw std::invalid_argument("unknown arch '" + s + "'");
}

struct ModelSpec {
    Arch arch = Arch::WNet;
    std::int64_t input_size = 576;
    std::int64_t base_channels = 32;
    std::vector<std::int64_t> channel_ladder = {32, 64, 128, 256};
    double leaky_slope = 0.01;
    double dropout_rate = 0.2;
    bool normalization = true;

    int heads() const { return arch == Arch::WNet ? 2 : 1; }
    bool dense_decoder() const { return arch != Arch::UNet; }
};

inline void validate_spec(const ModelSpec& spec) {
    if (spec.input_size <= 0 || spec.input_size % 8 != 0)
        throw std::invalid_argument("input_size must be a positive multiple of 8, got " +
                                    std::to_string(spec.input_size));
    if (spec.channel_ladder.size() != 4)
        throw std::invalid_argument("channel ladder must have 4 stages");
    if (spec.channel_ladder[0] != spec.base_channels)
        throw std::invalid_argument("channel ladder must start at base_channels");
    for (int i = 1; i < 4; ++i)
        if (spec.channel_ladder[static_cast<std::size_t>(i)] !=
            2 * spec.channel_ladder[static_cast<std::size_t>(i - 1)])
            throw std::invalid_argument("channel ladder must double at every pooling stage");
}

template <typename T>
struct ModelParams {
    NamedTensors<T> tensors;

    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw std::runtime_error("model parameter '" + name + "' missing");
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw std::runtime_error("model parameter '" + name + "' missing");
        return it->second;
    }

    ModelParams clone() const {
        ModelParams out;
        for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.clone());
        return out;
    }
};

inline bool is_trainable_name(const std::string& name) {
    return name.find("running_") == std::string::npos;
}

namespace detail {

struct ConvShape {
    std::string name;
    std::int64_t out_c, in_c, k;
};

inline std::vector<std::string> decoder_prefixes(const ModelSpec& spec) {
    if (spec.arch == Arch::WNet) return {"decA", "decB"};
    return {"dec"};
}

// Canonical parameter list in layer order; init and checkpointing follow it.
inline std::vector<ConvShape> conv_layout(const ModelSpec& spec) {
    const auto& L = spec.channel_ladder;
    std::vector<ConvShape> convs;
    std::int64_t in_c = 3;
    for (int s = 0; s < 4; ++s) {
        const std::int64_t c = L[static_cast<std::size_t>(s)];
        convs.push_back({"enc" + std::to_string(s + 1) + ".conv1", c, in_c, 3});
        convs.push_back({"enc" + std::to_string(s + 1) + ".conv2", c, c, 3});
        in_c = c;
    }
    for (const auto& prefix : decoder_prefixes(spec)) {
        // stage s reconstructs resolution of encoder stage 3-s
        for (int s = 1; s <= 3; ++s) {
            const std::int64_t up_c = L[static_cast<std::size_t>(4 - s)];
            const std::int64_t skip_c = L[static_cast<std::size_t>(3 - s)];
            const std::int64_t out_c = L[static_cast<std::size_t>(3 - s)];
            std::int64_t cat_c = up_c + skip_c;
            if (spec.dense_decoder() && s >= 2)
                cat_c += L[static_cast<std::size_t>(5 - s)];  // previous upsample output
            const std::string base = prefix + ".stage" + std::to_string(s);
            convs.push_back({base + ".conv1", out_c, cat_c, 3});
            convs.push_back({base + ".conv2", out_c, out_c, 3});
        }
        convs.push_back({prefix + ".head", 2, L[0], 1});
    }
    return convs;
}

}  // namespace detail

// Weights from N(0, 0.01^2), zero biases, identity affine norm, fresh
// running statistics. Iteration order is fixed so one seed gives one model.
template <typename T>
ModelParams<T> build_model(const ModelSpec& spec, std::mt19937_64& rng) {
    validate_spec(spec);
    ModelParams<T> params;
    auto add = [&](const std::string& name, Tensor<T> t) {
        params.tensors.emplace(name, std::move(t));
    };
    for (const auto& conv : detail::conv_layout(spec)) {
        auto w = Tensor<T>::zeros({conv.out_c, conv.in_c, conv.k, conv.k}, true);
        fill_normal(w, T{0}, T{0.01}, rng);
        add(conv.name + ".w", std::move(w));
        add(conv.name + ".b", Tensor<T>::zeros({conv.out_c}, true));
    }
    if (spec.normalization) {
        for (int s = 0; s < 4; ++s) {
            const std::int64_t c = spec.channel_ladder[static_cast<std::size_t>(s)];
            const std::string base = "enc" + std::to_string(s + 1) + ".norm";
            add(base + ".gamma", Tensor<T>::full({c}, T{1}, true));
            add(base + ".beta", Tensor<T>::zeros({c}, true));
            add(base + ".running_mean", Tensor<T>::zeros({c}));
            add(base + ".running_var", Tensor<T>::full({c}, T{1}));
        }
    }
    return params;
}

template <typename T>
std::int64_t count_params(const ModelParams<T>& params) {
    std::int64_t n = 0;
    for (const auto& [name, t] : params.tensors)
        if (is_trainable_name(name)) n += t.numel();
    return n;
}

// Forward pass. Returns one probability map per head ([N,2,S,S], sigmoid),
// W-net order is {OD, EX}. `rng` feeds dropout; pass any engine in eval mode.
template <typename T, typename Rng>
std::vector<Tensor<T>> forward(const ModelSpec& spec, ModelParams<T>& params,
                               const Tensor<T>& batch, bool training, Rng& rng,
                               Tape<T>* tape = nullptr) {
    validate_spec(spec);
    if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != spec.input_size ||
        batch.dim(3) != spec.input_size)
        throw std::invalid_argument(
            "forward: expected batch [N,3," + std::to_string(spec.input_size) + "," +
            std::to_string(spec.input_size) + "], got " + shape_str(batch.shape()));

    const T slope = static_cast<T>(spec.leaky_slope);
    const T rate = static_cast<T>(spec.dropout_rate);

    auto conv_block = [&](const Tensor<T>& x, const std::string& name) {
        auto y = conv2d(x, params.at(name + ".w"), params.at(name + ".b"),
                        Padding::Same, 1, tape);
        return leaky_relu(y, slope, tape);
    };

    // encoder
    std::vector<Tensor<T>> skips;
    Tensor<T> x = batch;
    for (int s = 1; s <= 4; ++s) {
        const std::string base = "enc" + std::to_string(s);
        x = conv_block(x, base + ".conv1");
        x = conv_block(x, base + ".conv2");
        if (spec.normalization) {
            BatchNormState<T> state{params.at(base + ".norm.running_mean"),
                                    params.at(base + ".norm.running_var")};
            x = batch_norm(x, params.at(base + ".norm.gamma"),
                           params.at(base + ".norm.beta"), state, training, T{0.9},
                           T{1e-5}, tape);
        }
        if (rate > T{0}) x = dropout(x, rate, training, rng, tape);
        if (s < 4) {
            skips.push_back(x);
            x = maxpool2d(x, tape);
        }
    }

    std::vector<Tensor<T>> outputs;
    for (const auto& prefix : detail::decoder_prefixes(spec)) {
        Tensor<T> d = x;
        Tensor<T> last_up;
        for (int s = 1; s <= 3; ++s) {
            auto up = upsample2x(d, tape);
            std::vector<Tensor<T>> feats{up, skips[static_cast<std::size_t>(3 - s)]};
            if (spec.dense_decoder() && s >= 2)
                feats.push_back(upsample2x(last_up, tape));
            d = concat(feats, tape);
            const std::string base = prefix + ".stage" + std::to_string(s);
            d = conv_block(d, base + ".conv1");
            d = conv_block(d, base + ".conv2");
            last_up = up;
        }
        auto logits = conv2d(d, params.at(prefix + ".head.w"),
                             params.at(prefix + ".head.b"), Padding::Same, 1, tape);
        outputs.push_back(sigmoid(logits, tape));
    }
    return outputs;
}

// ---- layer size audit ----

struct LayerRow {
    std::string path;   // "encoder", "decoder1", "decoder2"
    std::string label;  // Conv1, Max pooling, Upsampling, A_Conv7, ...
    std::int64_t channels;
    std::int64_t out_h;
    std::int64_t out_w;
};

// Analytic per-layer output-size table (no tensors are materialized).
inline std::vector<LayerRow> layer_table(const ModelSpec& spec) {
    validate_spec(spec);
    const auto& L = spec.channel_ladder;
    std::vector<LayerRow> rows;
    std::int64_t s = spec.input_size;
    for (int stage = 1; stage <= 4; ++stage) {
        const std::int64_t c = L[static_cast<std::size_t>(stage - 1)];
        rows.push_back({"encoder", "Conv" + std::to_string(2 * stage - 1), c, s, s});
        rows.push_back({"encoder", "Conv" + std::to_string(2 * stage), c, s, s});
        if (stage < 4) {
            s /= 2;
            rows.push_back({"encoder", "Max pooling", L[static_cast<std::size_t>(stage - 1)], s, s});
        }
    }
    const auto prefixes = detail::decoder_prefixes(spec);
    for (std::size_t d = 0; d < prefixes.size(); ++d) {
        const std::string path = "decoder" + std::to_string(d + 1);
        const char head_letter = (prefixes[d] == "decB") ? 'B' : 'A';
        std::int64_t r = spec.input_size / 8;
        int conv_idx = 1;
        for (int stage = 1; stage <= 3; ++stage) {
            r *= 2;
            rows.push_back({path, "Upsampling", L[static_cast<std::size_t>(4 - stage)], r, r});
            const std::int64_t c = L[static_cast<std::size_t>(3 - stage)];
            rows.push_back({path, std::string(1, head_letter) + "_Conv" +
                                      std::to_string(conv_idx++), c, r, r});
            rows.push_back({path, std::string(1, head_letter) + "_Conv" +
                                      std::to_string(conv_idx++), c, r, r});
        }
        rows.push_back({path, std::string(1, head_letter) + "_Conv7", 2, r, r});
    }
    return rows;
}

// ---- prediction ----

template <typename T>
struct Prediction {
    Tensor<float> od_probs, ex_probs;  // [S,S], undefined for absent heads
    Tensor<float> od_mask, ex_mask;    // binary at threshold
    double forward_seconds = 0.0;
};

// Full inference on one record: geometric normalization, enhancement,
// standardization, eval-mode forward, foreground-channel thresholding.
// Single-head models fill the slot named by `single_task_is_od`.
template <typename T>
Prediction<T> predict(const ModelSpec& spec, ModelParams<T>& params,
                      const ImageRecord& record, float threshold = 0.5f,
                      bool single_task_is_od = true) {
    auto rec = resize_or_pad(record, spec.input_size);
    auto enhanced = enhance(rec.rgb);
    auto net_in = standardize(enhanced);
    Tensor<T> batch = Tensor<T>::zeros({1, 3, spec.input_size, spec.input_size});
    for (std::int64_t i = 0; i < net_in.numel(); ++i)
        batch.data()[i] = static_cast<T>(net_in.data()[i]);

    std::mt19937_64 rng(0);  // unused in eval mode
    const auto t0 = std::chrono::steady_clock::now();
    auto heads = forward(spec, params, batch, /*training=*/false, rng);
    const auto t1 = std::chrono::steady_clock::now();

    Prediction<T> out;
    out.forward_seconds = std::chrono::duration<double>(t1 - t0).count();
    auto to_plane = [&](const Tensor<T>& head) {
        auto probs = slice_channel(head, 1);  // foreground channel
        Tensor<float> plane = Tensor<float>::zeros({spec.input_size, spec.input_size});
        for (std::int64_t i = 0; i < plane.numel(); ++i)
            plane.data()[i] = static_cast<float>(probs.data()[i]);
        return plane;
    };
    auto threshold_mask = [&](const Tensor<float>& probs) {
        Tensor<float> m = Tensor<float>::zeros(probs.shape());
        for (std::int64_t i = 0; i < probs.numel(); ++i)
            m.data()[i] = probs.data()[i] >= threshold ? 1.0f : 0.0f;
        return m;
    };
    if (spec.heads() == 2) {
        out.od_probs = to_plane(heads[0]);
        out.ex_probs = to_plane(heads[1]);
        out.od_mask = threshold_mask(out.od_probs);
        out.ex_mask = threshold_mask(out.ex_probs);
    } else if (single_task_is_od) {
        out.od_probs = to_plane(heads[0]);
        out.od_mask = threshold_mask(out.od_probs);
    } else {
        out.ex_probs = to_plane(heads[0]);
        out.ex_mask = threshold_mask(out.ex_probs);
    }
    return out;
}

// ---- model checkpoint (tensor container + JSON header) ----

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
    return {{"arch", arch_name(spec.arch)},
            {"input_size", spec.input_size},
            {"base_channels", spec.base_channels},
            {"channel_ladder", spec.channel_ladder},
            {"leaky_slope", spec.leaky_slope},
            {"dropout_rate", spec.dropout_rate},
            {"normalization", spec.normalization}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.arch = arch_from_name(j.at("arch").get<std::string>());
    spec.input_size = j.at("input_size").get<std::int64_t>();
    spec.base_channels = j.at("base_channels").get<std::int64_t>();
    spec.channel_ladder = j.at("channel_ladder").get<std::vector<std::int64_t>>();
    spec.leaky_slope = j.at("leaky_slope").get<double>();
    spec.dropout_rate = j.at("dropout_rate").get<double>();
    spec.normalization = j.at("normalization").get<bool>();
    return spec;
}

template <typename T>
void save_model(const std::string& path, const ModelSpec& spec,
                const ModelParams<T>& params, std::uint64_t seed, std::int64_t epoch) {
    nlohmann::json header = spec_to_json(spec);
    header["seed"] = seed;
    header["epoch"] = epoch;
    save_tensors(path, params.tensors, header.dump());
}

template <typename T>
ModelParams<T> load_model(const std::string& path, ModelSpec& spec,
                          std::uint64_t* seed = nullptr, std::int64_t* epoch = nullptr) {
    std::string header;
    ModelParams<T> params;
    params.tensors = load_tensors<T>(path, &header);
    const auto j = nlohmann::json::parse(header);
    spec = spec_from_json(j);
    if (seed) *seed = j.at("seed").get<std::uint64_t>();
    if (epoch) *epoch = j.at("epoch").get<std::int64_t>();
    for (auto& [name, t] : params.tensors)
        if (is_trainable_name(name)) t.set_requires_grad(true);
    return params;
}

}  // namespace wnet
