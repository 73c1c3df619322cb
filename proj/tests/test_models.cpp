#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "wnet/loss.hpp"
#include "wnet/model.hpp"

using wnet::Arch;
using wnet::ModelSpec;
using wnet::Tensor;

namespace {

ModelSpec desk_spec(Arch arch, std::int64_t size) {
    ModelSpec spec;
    spec.arch = arch;
    spec.input_size = size;
    return spec;
}

}  // namespace

TEST(Build, EncoderConvShapesMatchConfigurationTable) {
    std::mt19937_64 rng(1);
    auto spec = desk_spec(Arch::WNet, 576);
    auto params = wnet::build_model<float>(spec, rng);
    const std::vector<std::pair<std::string, wnet::Shape>> expected = {
        {"enc1.conv1.w", {32, 3, 3, 3}},   {"enc1.conv2.w", {32, 32, 3, 3}},
        {"enc2.conv1.w", {64, 32, 3, 3}},  {"enc2.conv2.w", {64, 64, 3, 3}},
        {"enc3.conv1.w", {128, 64, 3, 3}}, {"enc3.conv2.w", {128, 128, 3, 3}},
        {"enc4.conv1.w", {256, 128, 3, 3}},{"enc4.conv2.w", {256, 256, 3, 3}},
    };
    for (const auto& [name, shape] : expected)
        EXPECT_EQ(params.at(name).shape(), shape) << name;
    // decoder heads: 1x1 conv to 2 channels, one per decoder
    EXPECT_EQ(params.at("decA.head.w").shape(), (wnet::Shape{2, 32, 1, 1}));
    EXPECT_EQ(params.at("decB.head.w").shape(), (wnet::Shape{2, 32, 1, 1}));
}

TEST(Build, SameSeedGivesBitwiseIdenticalParams) {
    auto spec = desk_spec(Arch::WNet, 64);
    std::mt19937_64 r1(77), r2(77);
    auto a = wnet::build_model<float>(spec, r1);
    auto b = wnet::build_model<float>(spec, r2);
    ASSERT_EQ(a.tensors.size(), b.tensors.size());
    for (const auto& [name, t] : a.tensors)
        EXPECT_EQ(t.data(), b.at(name).data()) << name;
}

TEST(Build, WeightsFollowInitDistribution) {
    std::mt19937_64 rng(2);
    auto spec = desk_spec(Arch::WNet, 576);
    auto params = wnet::build_model<double>(spec, rng);
    const auto& w = params.at("decA.stage1.conv1.w");  // 128x384x3x3 = 442368 values
    ASSERT_GT(w.numel(), 100000);
    double mean = 0;
    for (double v : w.data()) mean += v;
    mean /= static_cast<double>(w.numel());
    double var = 0;
    for (double v : w.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.numel());
    EXPECT_GE(mean, -0.001);
    EXPECT_LE(mean, 0.001);
    EXPECT_GE(std::sqrt(var), 0.0095);
    EXPECT_LE(std::sqrt(var), 0.0105);
    // biases zero, affine identity
    for (double v : params.at("enc1.conv1.b").data()) EXPECT_EQ(v, 0.0);
    for (double v : params.at("enc1.norm.gamma").data()) EXPECT_EQ(v, 1.0);
    for (double v : params.at("enc1.norm.beta").data()) EXPECT_EQ(v, 0.0);
}

TEST(Build, LadderValidationRejectsBadSpecs) {
    ModelSpec spec;
    spec.input_size = 60;  // not divisible by 8
    std::mt19937_64 rng(3);
    EXPECT_THROW(wnet::build_model<float>(spec, rng), std::invalid_argument);
    spec.input_size = 64;
    spec.channel_ladder = {32, 64, 100, 200};
    EXPECT_THROW(wnet::build_model<float>(spec, rng), std::invalid_argument);
}

// The full Table 1 audit: every output size for input 576.
TEST(LayerTable, ReproducesEveryConfigurationRow) {
    auto rows = wnet::layer_table(desk_spec(Arch::WNet, 576));
    using Row = std::tuple<std::string, std::string, std::int64_t, std::int64_t>;
    const std::vector<Row> expected = {
        {"encoder", "Conv1", 32, 576},  {"encoder", "Conv2", 32, 576},
        {"encoder", "Max pooling", 32, 288},
        {"encoder", "Conv3", 64, 288},  {"encoder", "Conv4", 64, 288},
        {"encoder", "Max pooling", 64, 144},
        {"encoder", "Conv5", 128, 144}, {"encoder", "Conv6", 128, 144},
        {"encoder", "Max pooling", 128, 72},
        {"encoder", "Conv7", 256, 72},  {"encoder", "Conv8", 256, 72},
        {"decoder1", "Upsampling", 256, 144},
        {"decoder1", "A_Conv1", 128, 144}, {"decoder1", "A_Conv2", 128, 144},
        {"decoder1", "Upsampling", 128, 288},
        {"decoder1", "A_Conv3", 64, 288},  {"decoder1", "A_Conv4", 64, 288},
        {"decoder1", "Upsampling", 64, 576},
        {"decoder1", "A_Conv5", 32, 576},  {"decoder1", "A_Conv6", 32, 576},
        {"decoder1", "A_Conv7", 2, 576},
        {"decoder2", "Upsampling", 256, 144},
        {"decoder2", "B_Conv1", 128, 144}, {"decoder2", "B_Conv2", 128, 144},
        {"decoder2", "Upsampling", 128, 288},
        {"decoder2", "B_Conv3", 64, 288},  {"decoder2", "B_Conv4", 64, 288},
        {"decoder2", "Upsampling", 64, 576},
        {"decoder2", "B_Conv5", 32, 576},  {"decoder2", "B_Conv6", 32, 576},
        {"decoder2", "B_Conv7", 2, 576},
    };
    ASSERT_EQ(rows.size(), expected.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].path, std::get<0>(expected[i])) << i;
        EXPECT_EQ(rows[i].label, std::get<1>(expected[i])) << i;
        EXPECT_EQ(rows[i].channels, std::get<2>(expected[i])) << i;
        EXPECT_EQ(rows[i].out_h, std::get<3>(expected[i])) << i;
        EXPECT_EQ(rows[i].out_w, std::get<3>(expected[i])) << i;
    }
}

TEST(Forward, WnetProducesTwoHeadsOfInputSize) {
    auto spec = desk_spec(Arch::WNet, 64);
    std::mt19937_64 rng(5);
    auto params = wnet::build_model<float>(spec, rng);
    auto batch = Tensor<float>::zeros({1, 3, 64, 64});
    wnet::fill_uniform(batch, -1.0f, 1.0f, rng);
    std::mt19937_64 drop_rng(9);
    auto heads = wnet::forward(spec, params, batch, /*training=*/false, drop_rng);
    ASSERT_EQ(heads.size(), 2u);
    for (const auto& h : heads) {
        EXPECT_EQ(h.shape(), (wnet::Shape{1, 2, 64, 64}));
        for (float v : h.data()) {
            EXPECT_GT(v, 0.0f);
            EXPECT_LT(v, 1.0f);
        }
    }
}

TEST(Forward, SnetAndUnetShareOutputShape) {
    std::mt19937_64 rng(6);
    auto batch = Tensor<float>::zeros({2, 3, 32, 32});
    wnet::fill_uniform(batch, -1.0f, 1.0f, rng);
    for (auto arch : {Arch::SNet, Arch::UNet}) {
        auto spec = desk_spec(arch, 32);
        auto params = wnet::build_model<float>(spec, rng);
        std::mt19937_64 drop_rng(1);
        auto heads = wnet::forward(spec, params, batch, false, drop_rng);
        ASSERT_EQ(heads.size(), 1u) << wnet::arch_name(arch);
        EXPECT_EQ(heads[0].shape(), (wnet::Shape{2, 2, 32, 32}));
    }
}

TEST(Forward, WrongSpatialSizeNamesExpected) {
    auto spec = desk_spec(Arch::WNet, 64);
    std::mt19937_64 rng(7);
    auto params = wnet::build_model<float>(spec, rng);
    auto batch = Tensor<float>::zeros({1, 3, 32, 32});
    std::mt19937_64 drop_rng(1);
    try {
        wnet::forward(spec, params, batch, false, drop_rng);
        FAIL() << "expected size error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("64"), std::string::npos) << e.what();
    }
}

TEST(CountParams, SingleConvArithmetic) {
    wnet::ModelParams<float> params;
    params.tensors.emplace("layer.w", Tensor<float>::zeros({32, 3, 3, 3}));
    params.tensors.emplace("layer.b", Tensor<float>::zeros({32}));
    EXPECT_EQ(wnet::count_params(params), 32 * 3 * 3 * 3 + 32);
}

TEST(CountParams, MatchesPaperScaleWithin15Percent) {
    std::mt19937_64 rng(8);
    auto wparams = wnet::build_model<float>(desk_spec(Arch::WNet, 576), rng);
    auto sparams = wnet::build_model<float>(desk_spec(Arch::SNet, 576), rng);
    const auto wn = wnet::count_params(wparams);
    const auto sn = wnet::count_params(sparams);
    EXPECT_LT(wn, 2 * sn);
    EXPECT_NEAR(static_cast<double>(wn), 2.9e6, 0.15 * 2.9e6);
    EXPECT_NEAR(static_cast<double>(2 * sn), 4.1e6, 0.15 * 4.1e6);
    // running statistics are excluded from the count
    auto with_stats = wn;
    std::int64_t all = 0;
    for (const auto& [name, t] : wparams.tensors) all += t.numel();
    EXPECT_GT(all, with_stats);
}

// Shared-encoder gradient structure: with the total loss at weight omega,
// encoder gradients are the omega-weighted sum of the gradients each head
// induces alone; the opposite decoder gets exactly zero at the endpoints.
class WnetGradients : public ::testing::Test {
protected:
    using T = double;

    void SetUp() override {
        spec_ = desk_spec(Arch::WNet, 16);
        spec_.dropout_rate = 0.2;  // exercised; fixed seed keeps passes aligned
        std::mt19937_64 rng(21);
        params_ = wnet::build_model<T>(spec_, rng);
        batch_ = Tensor<T>::zeros({1, 3, 16, 16});
        wnet::fill_uniform(batch_, T{-1}, T{1}, rng);
        od_labels_ = Tensor<T>::zeros({1, 16, 16});
        ex_labels_ = Tensor<T>::zeros({1, 16, 16});
        std::uniform_real_distribution<double> coin(0, 1);
        for (auto& v : od_labels_.data()) v = coin(rng) < 0.3 ? 1 : 0;
        for (auto& v : ex_labels_.data()) v = coin(rng) < 0.1 ? 1 : 0;
    }

    // Runs forward + backward from the requested scalar; returns that scalar.
    // mode: 0 = total(omega), 1 = EX alone, 2 = OD alone.
    double run_backward(int mode, double omega) {
        for (auto& [name, t] : params_.tensors)
            if (t.requires_grad()) t.zero_grad();
        wnet::Tape<T> tape;
        std::mt19937_64 drop_rng(4242);
        auto heads = wnet::forward(spec_, params_, batch_, true, drop_rng, &tape);
        auto od_probs = wnet::slice_channel(heads[0], 1, &tape);
        auto ex_probs = wnet::slice_channel(heads[1], 1, &tape);
        auto od_loss = wnet::class_balanced_bce(od_probs, od_labels_, T{0.7}, &tape);
        auto ex_loss = wnet::class_balanced_bce(ex_probs, ex_labels_, T{0.9}, &tape);
        wnet::Tensor<T> loss;
        if (mode == 0)
            loss = wnet::total_loss(ex_loss, od_loss, static_cast<T>(omega), &tape);
        else if (mode == 1)
            loss = ex_loss;
        else
            loss = od_loss;
        wnet::backward(loss, tape);
        return loss.item();
    }

    std::map<std::string, std::vector<T>> grads_with_prefix(const std::string& prefix) {
        std::map<std::string, std::vector<T>> out;
        for (auto& [name, t] : params_.tensors)
            if (t.requires_grad() && name.rfind(prefix, 0) == 0) out[name] = t.grad();
        return out;
    }

    ModelSpec spec_;
    wnet::ModelParams<T> params_;
    Tensor<T> batch_, od_labels_, ex_labels_;
};

TEST_F(WnetGradients, EncoderGradIsOmegaWeightedSumOfHeadGrads) {
    const double omega = 0.6;
    run_backward(0, omega);
    auto total = grads_with_prefix("enc");
    run_backward(1, omega);
    auto ex_only = grads_with_prefix("enc");
    run_backward(2, omega);
    auto od_only = grads_with_prefix("enc");
    ASSERT_FALSE(total.empty());
    for (const auto& [name, g] : total) {
        const auto& ge = ex_only.at(name);
        const auto& go = od_only.at(name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double expect = omega * ge[i] + (1 - omega) * go[i];
            EXPECT_TRUE(oracle::fd_close(g[i], expect, 1e-10, 1e-14))
                << name << "[" << i << "] " << g[i] << " vs " << expect;
        }
    }
}

TEST_F(WnetGradients, OmegaOneSilencesOdDecoder) {
    run_backward(0, 1.0);
    for (const auto& [name, g] : grads_with_prefix("decA"))
        for (double v : g) ASSERT_EQ(v, 0.0) << name;
    bool ex_has_grad = false;
    for (const auto& [name, g] : grads_with_prefix("decB"))
        for (double v : g) ex_has_grad = ex_has_grad || v != 0.0;
    EXPECT_TRUE(ex_has_grad);
}

TEST_F(WnetGradients, OmegaZeroSilencesExDecoder) {
    run_backward(0, 0.0);
    for (const auto& [name, g] : grads_with_prefix("decB"))
        for (double v : g) ASSERT_EQ(v, 0.0) << name;
    bool od_has_grad = false;
    for (const auto& [name, g] : grads_with_prefix("decA"))
        for (double v : g) od_has_grad = od_has_grad || v != 0.0;
    EXPECT_TRUE(od_has_grad);
}

TEST(Predict, DeterministicAndThresholdExtremes) {
    auto spec = desk_spec(Arch::WNet, 32);
    std::mt19937_64 rng(31);
    auto params = wnet::build_model<float>(spec, rng);
    wnet::ImageRecord rec;
    rec.id = "p";
    rec.rgb = Tensor<float>::zeros({3, 32, 32});
    wnet::fill_uniform(rec.rgb, 0.0f, 255.0f, rng);
    auto a = wnet::predict(spec, params, rec);
    auto b = wnet::predict(spec, params, rec);
    EXPECT_EQ(a.od_probs.data(), b.od_probs.data());
    EXPECT_EQ(a.ex_probs.data(), b.ex_probs.data());
    auto all_fg = wnet::predict(spec, params, rec, 0.0f);
    for (float v : all_fg.od_mask.data()) EXPECT_EQ(v, 1.0f);
    auto all_bg = wnet::predict(spec, params, rec, 1.0f);
    for (float v : all_bg.od_mask.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_GT(a.forward_seconds, 0.0);
}

TEST(Checkpoint, ModelRoundTripIsBitwise) {
    auto spec = desk_spec(Arch::WNet, 32);
    std::mt19937_64 rng(37);
    auto params = wnet::build_model<float>(spec, rng);
    const std::string path = ::testing::TempDir() + "/model_roundtrip.wnt";
    wnet::save_model(path, spec, params, 1234u, 17);
    ModelSpec spec2;
    std::uint64_t seed = 0;
    std::int64_t epoch = 0;
    auto loaded = wnet::load_model<float>(path, spec2, &seed, &epoch);
    EXPECT_EQ(seed, 1234u);
    EXPECT_EQ(epoch, 17);
    EXPECT_EQ(spec2.input_size, spec.input_size);
    EXPECT_EQ(spec2.arch, spec.arch);
    ASSERT_EQ(loaded.tensors.size(), params.tensors.size());
    for (const auto& [name, t] : params.tensors) {
        EXPECT_EQ(loaded.at(name).shape(), t.shape()) << name;
        EXPECT_EQ(loaded.at(name).data(), t.data()) << name;
    }
    // forward after reload is bitwise identical
    auto batch = Tensor<float>::zeros({1, 3, 32, 32});
    wnet::fill_uniform(batch, -1.0f, 1.0f, rng);
    std::mt19937_64 r1(0), r2(0);
    auto before = wnet::forward(spec, params, batch, false, r1);
    auto after = wnet::forward(spec2, loaded, batch, false, r2);
    EXPECT_EQ(before[0].data(), after[0].data());
    EXPECT_EQ(before[1].data(), after[1].data());
}
