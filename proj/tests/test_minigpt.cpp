#include <catch2/catch_amalgamated.hpp>

#include <irnlm/minigpt.hpp>

#include "testutil.hpp"

#include <cmath>
#include <vector>

using namespace irnlm;
using minigpt::BiasSource;
using minigpt::ModelConfig;
using minigpt::PositionalMode;
using testutil::TempDir;

namespace {

ModelConfig small_config(PositionalMode mode, int n_layers = 2) {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.n_layers = n_layers;
    cfg.n_heads = 2;
    cfg.d_head = 3;
    cfg.max_seq = 8;
    cfg.positional = mode;
    cfg.seed = 5;
    return cfg;
}

const std::vector<int> kIds = {1, 4, 2, 9, 3, 7, 5};

}  // namespace

TEST_CASE("relative_distance maps signed offsets onto table rows") {
    const Eigen::MatrixXi d = minigpt::relative_distance(3, 5);
    Eigen::MatrixXi expect(3, 3);
    expect << 4, 5, 6, 3, 4, 5, 2, 3, 4;
    REQUIRE(d == expect);

    // Corners of a full-length matrix span the whole table exactly.
    const int n = 6;
    const Eigen::MatrixXi full = minigpt::relative_distance(n, n);
    REQUIRE(full(n - 1, 0) == 0);
    REQUIRE(full(0, n - 1) == 2 * n - 2);
    REQUIRE(full(2, 2) == n - 1);
}

TEST_CASE("embed_distances gathers table rows per position pair") {
    // Table row r holds the constant r, so lookups reveal the id used.
    Eigen::MatrixXd table(9, 2);
    for (int r = 0; r < 9; ++r) table.row(r).setConstant(r);

    const Eigen::MatrixXi d = minigpt::relative_distance(4, 5);
    const auto u = minigpt::embed_distances(d, table);
    REQUIRE(u.size() == 4);
    for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 4; ++k) REQUIRE(u[static_cast<std::size_t>(j)](k, 0) == d(j, k));

    Eigen::MatrixXd tiny = table.topRows(3);
    REQUIRE_THROWS_AS(minigpt::embed_distances(minigpt::relative_distance(4, 5), tiny),
                      DataError);
}

TEST_CASE("relative_bias equals the elementwise triple loop") {
    Rng rng(91);
    const int m = 5, dh = 3, heads = 2;
    Eigen::MatrixXd table(2 * 7 - 1, dh);
    for (Eigen::Index i = 0; i < table.rows(); ++i)
        for (int d = 0; d < dh; ++d) table(i, d) = rng.normal();

    std::vector<Eigen::MatrixXd> src(heads);
    for (auto& s : src) {
        s.resize(m, dh);
        for (int i = 0; i < m; ++i)
            for (int d = 0; d < dh; ++d) s(i, d) = rng.normal();
    }

    const auto u = minigpt::embed_distances(minigpt::relative_distance(m, 7), table);
    const auto got = minigpt::relative_bias(src, u);
    REQUIRE(got.size() == static_cast<std::size_t>(heads));

    for (int h = 0; h < heads; ++h)
        for (int j = 0; j < m; ++j)
            for (int k = 0; k < m; ++k) {
                double expect = 0.0;
                for (int d = 0; d < dh; ++d)
                    expect += src[static_cast<std::size_t>(h)](j, d) *
                              u[static_cast<std::size_t>(j)](k, d);
                REQUIRE(std::abs(got[static_cast<std::size_t>(h)](j, k) - expect) < 1e-12);
            }
}

TEST_CASE("relative_bias validates shapes") {
    REQUIRE_THROWS_AS(minigpt::relative_bias({}, {}), DataError);

    std::vector<Eigen::MatrixXd> src = {Eigen::MatrixXd::Zero(3, 2)};
    std::vector<Eigen::MatrixXd> u(2, Eigen::MatrixXd::Zero(3, 2));
    REQUIRE_THROWS_AS(minigpt::relative_bias(src, u), DataError);

    std::vector<Eigen::MatrixXd> bad_u(3, Eigen::MatrixXd::Zero(3, 5));
    REQUIRE_THROWS_AS(minigpt::relative_bias(src, bad_u), DataError);
}

TEST_CASE("gelu uses the exact error function") {
    REQUIRE(minigpt::detail::gelu(0.0) == 0.0);
    REQUIRE(minigpt::detail::gelu(1.0) == Catch::Approx(0.8413447460685429).epsilon(1e-12));
    REQUIRE(minigpt::detail::gelu(10.0) == Catch::Approx(10.0).epsilon(1e-12));
    REQUIRE(std::abs(minigpt::detail::gelu(-10.0)) < 1e-12);

    // Analytic derivative vs central difference.
    for (double x : {-2.0, -0.5, 0.0, 0.3, 1.7}) {
        const double h = 1e-6;
        const double numeric =
            (minigpt::detail::gelu(x + h) - minigpt::detail::gelu(x - h)) / (2.0 * h);
        REQUIRE(minigpt::detail::gelu_grad(x) == Catch::Approx(numeric).margin(1e-8));
    }
}

TEST_CASE("layer_norm normalizes rows with the population variance") {
    Eigen::MatrixXd x(1, 4);
    x << 1.0, 2.0, 3.0, 4.0;
    Eigen::MatrixXd g = Eigen::MatrixXd::Ones(1, 4);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, 4);
    minigpt::detail::LnCache cache;
    const Eigen::MatrixXd y = minigpt::detail::layer_norm(x, g, b, cache);

    const double var = 1.25;  // population variance of {1,2,3,4}
    for (int j = 0; j < 4; ++j)
        REQUIRE(y(0, j) ==
                Catch::Approx((x(0, j) - 2.5) / std::sqrt(var + 1e-5)).epsilon(1e-12));

    // Gain and shift apply after normalization.
    g.setConstant(2.0);
    b.setConstant(1.0);
    minigpt::detail::LnCache cache2;
    const Eigen::MatrixXd y2 = minigpt::detail::layer_norm(x, g, b, cache2);
    for (int j = 0; j < 4; ++j) REQUIRE(y2(0, j) == Catch::Approx(2.0 * y(0, j) + 1.0));
}

TEST_CASE("forward produces one logit row per token") {
    for (PositionalMode mode :
         {PositionalMode::Absolute, PositionalMode::None, PositionalMode::RelativeBias}) {
        const auto p = minigpt::init_parameters(small_config(mode));
        const auto out = minigpt::forward(p, kIds);
        REQUIRE(out.logits.rows() == static_cast<Eigen::Index>(kIds.size()));
        REQUIRE(out.logits.cols() == 11);
        REQUIRE(out.hidden.size() == 2);
        for (const auto& hm : out.hidden) {
            REQUIRE(hm.rows() == static_cast<Eigen::Index>(kIds.size()));
            REQUIRE(hm.cols() == 6);
        }
        REQUIRE(out.logits.allFinite());
    }
}

TEST_CASE("attention is causal and row-normalized") {
    const auto p = minigpt::init_parameters(small_config(PositionalMode::RelativeBias));
    const auto out = minigpt::forward(p, kIds, true);
    REQUIRE(out.attention.size() == 2);
    const int m = static_cast<int>(kIds.size());
    for (const auto& layer : out.attention) {
        REQUIRE(layer.size() == 2);
        for (const auto& a : layer) {
            REQUIRE(a.rows() == m);
            for (int i = 0; i < m; ++i) {
                REQUIRE(a.row(i).sum() == Catch::Approx(1.0).epsilon(1e-12));
                for (int j = i + 1; j < m; ++j) REQUIRE(a(i, j) == 0.0);
            }
        }
    }

    // Attention is not captured unless asked for.
    REQUIRE(minigpt::forward(p, kIds).attention.empty());
}

TEST_CASE("a zero model scores every token uniformly") {
    const auto p0 = minigpt::zeros_like(minigpt::init_parameters(small_config(
        PositionalMode::Absolute)));
    std::vector<int> ids = {1, 2, 3};
    REQUIRE(minigpt::loss(p0, ids) == Catch::Approx(std::log(11.0)).epsilon(1e-12));
}

TEST_CASE("future tokens cannot influence earlier logits") {
    const auto p = minigpt::init_parameters(small_config(PositionalMode::Absolute));
    std::vector<int> a = kIds, b = kIds;
    b.back() = 0;
    const auto la = minigpt::forward(p, a).logits;
    const auto lb = minigpt::forward(p, b).logits;
    REQUIRE(la.topRows(la.rows() - 1) == lb.topRows(lb.rows() - 1));
    REQUIRE(la.row(la.rows() - 1) != lb.row(lb.rows() - 1));
}

TEST_CASE("one layer without positions treats the prefix as a bag") {
    const auto p = minigpt::init_parameters(small_config(PositionalMode::None, 1));
    // Permute the predecessors of the last position, keep the last one fixed.
    std::vector<int> ids = {1, 4, 2, 9, 3, 7, 5, 6};
    std::vector<int> permuted = {5, 3, 9, 1, 7, 2, 4, 6};

    const Eigen::MatrixXd a = minigpt::forward(p, ids).logits;
    const Eigen::MatrixXd b = minigpt::forward(p, permuted).logits;
    const Eigen::Index last = a.rows() - 1;
    REQUIRE((a.row(last) - b.row(last)).cwiseAbs().maxCoeff() < 1e-6);

    // With absolute positions the same permutation is visible.
    const auto pa = minigpt::init_parameters(small_config(PositionalMode::Absolute, 1));
    const Eigen::MatrixXd c = minigpt::forward(pa, ids).logits;
    const Eigen::MatrixXd e = minigpt::forward(pa, permuted).logits;
    REQUIRE((c.row(last) - e.row(last)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("forward validates its input ids") {
    const auto p = minigpt::init_parameters(small_config(PositionalMode::Absolute));
    REQUIRE_THROWS_AS(minigpt::forward(p, {}), DataError);
    REQUIRE_THROWS_AS(minigpt::forward(p, {1, 2, 11}), DataError);
    REQUIRE_THROWS_AS(minigpt::forward(p, {-1}), DataError);
    REQUIRE_THROWS_AS(minigpt::forward(p, std::vector<int>(9, 1)), DataError);
}

TEST_CASE("lm_loss matches hand-computed cross-entropies") {
    Eigen::MatrixXd logits(1, 2);
    logits << 0.0, 0.0;
    REQUIRE(minigpt::lm_loss(logits, {0}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));

    logits << std::log(3.0), 0.0;
    REQUIRE(minigpt::lm_loss(logits, {0}) ==
            Catch::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));
    REQUIRE(minigpt::lm_loss(logits, {1}) == Catch::Approx(std::log(4.0)).epsilon(1e-12));

    REQUIRE_THROWS_AS(minigpt::lm_loss(logits, {}), DataError);
    REQUIRE_THROWS_AS(minigpt::lm_loss(logits, {2}), DataError);
    REQUIRE_THROWS_AS(minigpt::lm_loss(logits, {0, 0}), DataError);
}

TEST_CASE("sequence_loss shifts targets by one") {
    Eigen::MatrixXd logits(3, 4);
    logits.setZero();
    std::vector<int> ids = {0, 3, 1};
    // Targets are {3, 1}; only the first two logit rows are scored.
    REQUIRE(minigpt::sequence_loss(logits, ids) ==
            Catch::Approx(std::log(4.0)).epsilon(1e-12));
    REQUIRE_THROWS_AS(minigpt::sequence_loss(logits, {0}), DataError);
}

TEST_CASE("analytic gradients agree with central differences in every mode") {
    for (PositionalMode mode :
         {PositionalMode::Absolute, PositionalMode::None, PositionalMode::RelativeBias}) {
        const auto p = minigpt::init_parameters(small_config(mode));
        const double worst = minigpt::gradient_check(p, kIds, 80, 17);
        INFO("mode " << minigpt::positional_name(mode));
        REQUIRE(worst < 1e-4);
    }

    ModelConfig key_cfg = small_config(PositionalMode::RelativeBias);
    key_cfg.bias_source = BiasSource::Key;
    const auto pk = minigpt::init_parameters(key_cfg);
    REQUIRE(minigpt::gradient_check(pk, kIds, 80, 18) < 1e-4);
}

TEST_CASE("make_sequences chunks a stream and keeps trailing pairs") {
    REQUIRE(minigpt::make_sequences({1, 2, 3, 4, 5}, 3) ==
            std::vector<std::vector<int>>{{1, 2, 3}, {4, 5}});
    // A trailing single token cannot be scored and is dropped.
    REQUIRE(minigpt::make_sequences({1, 2, 3, 4}, 3) ==
            std::vector<std::vector<int>>{{1, 2, 3}});
    REQUIRE_THROWS_AS(minigpt::make_sequences({1}, 3), DataError);
}

TEST_CASE("make_context_batches caps the visible history at k") {
    const auto rows = minigpt::make_context_batches({5, 6, 7, 8, 9}, 2);
    REQUIRE(rows == std::vector<std::vector<int>>{{0, 5, 6, 7, 8, 2, 0},
                                                  {0, 6, 7, 8, 9, 2, 0}});
    for (const auto& r : rows) REQUIRE(r.size() == 2 + 5);

    REQUIRE_THROWS_AS(minigpt::make_context_batches({5, 6, 7}, 0), ConfigError);
    REQUIRE_THROWS_AS(minigpt::make_context_batches({5, 6}, 5), DataError);
}

TEST_CASE("training reduces the loss and is reproducible") {
    ModelConfig cfg = small_config(PositionalMode::Absolute, 1);
    Rng rng(3);
    std::vector<int> stream;
    for (int t = 0; t < 240; ++t) stream.push_back(static_cast<int>(rng.uniform_int(3, 6)));

    minigpt::OptimizerSettings opt;
    opt.epochs = 3;
    opt.batch_size = 4;
    opt.seed = 9;

    auto p1 = minigpt::init_parameters(cfg);
    const auto log1 = minigpt::train_stream(p1, stream, opt);
    REQUIRE(log1.epoch_loss.size() == 3);
    REQUIRE(log1.epoch_loss.back() < log1.epoch_loss.front());
    REQUIRE_FALSE(log1.step_loss.empty());
    for (std::size_t i = 1; i < log1.step_loss.size(); ++i)
        REQUIRE(log1.step_loss[i].first > log1.step_loss[i - 1].first);

    auto p2 = minigpt::init_parameters(cfg);
    const auto log2 = minigpt::train_stream(p2, stream, opt);
    REQUIRE(log1.epoch_loss == log2.epoch_loss);
    REQUIRE(p1.w_out == p2.w_out);
    REQUIRE(p1.tok_emb == p2.tok_emb);

    REQUIRE_THROWS_AS(minigpt::train(p1, {}, opt), DataError);
    REQUIRE_THROWS_AS(minigpt::train(p1, {{1}}, opt), DataError);
}

TEST_CASE("checkpoints round-trip the parameters and meta exactly") {
    TempDir tmp;
    ModelConfig cfg = small_config(PositionalMode::RelativeBias);
    const auto p = minigpt::init_parameters(cfg);

    const auto path = tmp / "model.ckpt";
    io::json meta;
    meta["mode"] = "syntactic";
    meta["trained_k"] = 15;
    minigpt::save_checkpoint(path, p, meta);

    io::json meta_back;
    const auto q = minigpt::load_checkpoint(path, &meta_back);
    REQUIRE(meta_back == meta);
    REQUIRE(q.cfg.vocab_size == cfg.vocab_size);
    REQUIRE(q.cfg.positional == PositionalMode::RelativeBias);

    bool same = true;
    std::vector<const Eigen::MatrixXd*> qs;
    q.visit([&](const std::string&, const Eigen::MatrixXd& m) { qs.push_back(&m); });
    std::size_t i = 0;
    p.visit([&](const std::string&, const Eigen::MatrixXd& m) {
        const Eigen::MatrixXd back = *qs[i++];
        // Values pass through f32 on disk.
        same = same && back == m.unaryExpr([](double v) {
                   return static_cast<double>(static_cast<float>(v));
               });
    });
    REQUIRE(same);

    // Re-saving a loaded model reproduces the file byte for byte.
    const auto path2 = tmp / "model2.ckpt";
    minigpt::save_checkpoint(path2, q, meta_back);
    REQUIRE(io::read_text(path) == io::read_text(path2));
}

TEST_CASE("load_checkpoint rejects foreign files and layout drift") {
    TempDir tmp;
    const auto path = tmp / "bad.ckpt";
    io::json header;
    header["kind"] = "something_else";
    io::write_checkpoint(path, header, {});
    REQUIRE_THROWS_AS(minigpt::load_checkpoint(path), DataError);

    // Drop the last tensor from a valid checkpoint.
    const auto good = tmp / "good.ckpt";
    minigpt::save_checkpoint(good, minigpt::init_parameters(small_config(
                                       PositionalMode::Absolute)));
    std::vector<io::NamedTensor> tensors;
    io::json hdr = io::read_checkpoint(good, tensors);
    tensors.pop_back();
    hdr.erase("tensors");
    io::write_checkpoint(good, hdr, tensors);
    REQUIRE_THROWS_AS(minigpt::load_checkpoint(good), DataError);
}

TEST_CASE("default_layer sits three quarters up the stack") {
    REQUIRE(minigpt::default_layer(1) == 1);
    REQUIRE(minigpt::default_layer(2) == 2);
    REQUIRE(minigpt::default_layer(3) == 3);
    REQUIRE(minigpt::default_layer(4) == 3);
    REQUIRE(minigpt::default_layer(8) == 6);
}

TEST_CASE("model config serializes and validates") {
    ModelConfig cfg = small_config(PositionalMode::RelativeBias);
    cfg.bias_source = BiasSource::Key;
    const ModelConfig back = ModelConfig::from_json(cfg.to_json());
    REQUIRE(back.vocab_size == cfg.vocab_size);
    REQUIRE(back.positional == cfg.positional);
    REQUIRE(back.bias_source == BiasSource::Key);
    REQUIRE(back.seed == cfg.seed);

    ModelConfig bad = cfg;
    bad.vocab_size = 0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_seq = 1;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);

    REQUIRE(minigpt::positional_from_name("none") == PositionalMode::None);
    REQUIRE(minigpt::positional_from_name("absolute") == PositionalMode::Absolute);
    REQUIRE(minigpt::positional_from_name("relative_bias") == PositionalMode::RelativeBias);
    REQUIRE_THROWS_AS(minigpt::positional_from_name("rotary"), ConfigError);
}
