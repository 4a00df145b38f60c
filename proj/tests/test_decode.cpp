#include <catch2/catch_amalgamated.hpp>

#include <irnlm/decode.hpp>

#include <cmath>
#include <vector>

using namespace irnlm;

namespace {

// Three runs of well-separated two-class data in three dimensions.
decode::LabeledData separable_data(double noise_sd, std::uint64_t seed) {
    decode::LabeledData data;
    data.class_names = {"a", "b"};
    const int n_runs = 3, per_run = 20;
    data.x.resize(n_runs * per_run, 3);
    Rng rng(seed);
    Eigen::Index row = 0;
    for (int run = 0; run < n_runs; ++run) {
        for (int i = 0; i < per_run; ++i, ++row) {
            const int label = i % 2;
            const double center = label == 0 ? -2.0 : 2.0;
            for (Eigen::Index c = 0; c < 3; ++c)
                data.x(row, c) = center + noise_sd * rng.normal();
            data.labels.push_back(label);
            data.run_ids.push_back(run);
        }
    }
    return data;
}

}  // namespace

TEST_CASE("fit_logistic separates obvious clusters") {
    const auto data = separable_data(0.3, 11);
    const auto model = decode::fit_logistic(data.x, data.labels);
    REQUIRE(decode::accuracy(decode::predict(model, data.x), data.labels) == 1.0);
    REQUIRE(model.final_loss < std::log(2.0));  // better than the uniform guess
    REQUIRE(model.iterations > 0);
}

TEST_CASE("fit_logistic compacts sparse label ids") {
    Eigen::MatrixXd x(4, 1);
    x << -1.0, -1.2, 1.0, 1.1;
    const std::vector<int> labels = {5, 5, 9, 9};
    const auto model = decode::fit_logistic(x, labels);
    REQUIRE(model.class_ids == std::vector<int>{5, 9});
    REQUIRE(model.w.cols() == 2);
    const auto pred = decode::predict(model, x);
    for (int p : pred) REQUIRE((p == 5 || p == 9));
    REQUIRE(pred == labels);
}

TEST_CASE("fit_logistic and predict validate their input") {
    Eigen::MatrixXd x(2, 1);
    x << 0.0, 1.0;
    REQUIRE_THROWS_AS(decode::fit_logistic(x, {0}), DataError);
    REQUIRE_THROWS_AS(decode::fit_logistic(Eigen::MatrixXd(0, 1), {}), DataError);
    REQUIRE_THROWS_AS(decode::fit_logistic(x, {0, 1}, -0.5), ConfigError);

    const auto model = decode::fit_logistic(x, {0, 1});
    Eigen::MatrixXd wide(1, 2);
    wide << 0.0, 1.0;
    REQUIRE_THROWS_AS(decode::predict(model, wide), DataError);
}

TEST_CASE("accuracy counts exact matches") {
    REQUIRE(decode::accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
    REQUIRE(decode::accuracy({1, 2, 3}, {1, 0, 3}) == Catch::Approx(2.0 / 3.0));
    REQUIRE(decode::accuracy({1}, {2}) == 0.0);
    REQUIRE_THROWS_AS(decode::accuracy({1}, {1, 2}), DataError);
    REQUIRE_THROWS_AS(decode::accuracy({}, {}), DataError);
}

TEST_CASE("the most-frequent dummy breaks ties toward the smallest label") {
    // 1 and 2 both occur twice in training; the dummy must pick 1.
    const std::vector<int> train = {2, 1, 2, 1, 3};
    const std::vector<int> test = {1, 2, 1};
    REQUIRE(decode::dummy_accuracy(train, test, decode::DummyStrategy::MostFrequent) ==
            Catch::Approx(2.0 / 3.0));
    REQUIRE_THROWS_AS(decode::dummy_accuracy({}, test, decode::DummyStrategy::MostFrequent),
                      DataError);
}

TEST_CASE("the prior-sampling dummy matches its closed form and a simulation") {
    const std::vector<int> train = {0, 0, 1};
    const std::vector<int> test = {0, 1, 1};
    // sum over classes of p_train * p_test = (2/3)(1/3) + (1/3)(2/3) = 4/9
    const double expect = 4.0 / 9.0;
    REQUIRE(decode::dummy_accuracy(train, test, decode::DummyStrategy::PriorSampling) ==
            Catch::Approx(expect).epsilon(1e-12));
    const double sim = decode::dummy_prior_sampling_simulated(train, test, 7, 20000);
    REQUIRE(sim == Catch::Approx(expect).margin(0.01));
    REQUIRE_THROWS_AS(decode::dummy_prior_sampling_simulated(train, test, 7, 0), ConfigError);

    // classes absent from the test fold contribute nothing
    REQUIRE(decode::dummy_accuracy({4, 4}, {5, 5}, decode::DummyStrategy::PriorSampling) == 0.0);
}

TEST_CASE("fold scaling uses training statistics and zeroes flat features") {
    Eigen::MatrixXd train(2, 2), test(1, 2);
    train << 0.0, 7.0, 2.0, 7.0;
    test << 3.0, 9.0;
    decode::detail::scale_train_test(train, test);
    REQUIRE(train(0, 0) == Catch::Approx(-1.0));
    REQUIRE(train(1, 0) == Catch::Approx(1.0));
    REQUIRE(test(0, 0) == Catch::Approx(2.0));  // (3 - 1) / 1 from training stats
    REQUIRE(train.col(1).isZero());
    REQUIRE(test.col(1).isZero());  // flat in training, zeroed everywhere
}

TEST_CASE("cv_decode recovers separable structure and is deterministic") {
    const auto data = separable_data(0.3, 11);
    const auto res = decode::cv_decode(data);
    REQUIRE(res.fold_runs == std::vector<int>{0, 1, 2});
    REQUIRE(res.fold_accuracy.size() == 3);
    REQUIRE(res.mean_accuracy > 0.9);

    const auto rerun = decode::cv_decode(data);
    REQUIRE(rerun.mean_accuracy == res.mean_accuracy);
    REQUIRE(rerun.fold_accuracy == res.fold_accuracy);
}

TEST_CASE("cv_decode stays near chance when features carry no signal") {
    auto data = separable_data(0.3, 11);
    // overwrite the features with label-independent noise
    Rng rng(99);
    for (Eigen::Index i = 0; i < data.x.rows(); ++i)
        for (Eigen::Index c = 0; c < data.x.cols(); ++c) data.x(i, c) = rng.normal();
    const auto res = decode::cv_decode(data);
    REQUIRE(res.mean_accuracy > 0.3);
    REQUIRE(res.mean_accuracy < 0.7);
}

TEST_CASE("classes unseen in training count as misses") {
    decode::LabeledData data;
    data.class_names = {"a", "b", "c"};
    data.x.resize(4, 1);
    data.x << -1.0, 1.0, 0.5, 0.6;
    data.labels = {0, 1, 2, 2};
    data.run_ids = {0, 0, 1, 1};
    const auto res = decode::cv_decode(data);
    // run 1 holds only class 2, which run 0 never trains on, and vice versa
    REQUIRE(res.mean_accuracy == 0.0);
    REQUIRE(res.fold_accuracy == std::vector<double>{0.0, 0.0});
}

TEST_CASE("cv_dummy scores the same folds with a baseline") {
    const auto data = separable_data(0.3, 11);
    const auto mf = decode::cv_dummy(data, decode::DummyStrategy::MostFrequent);
    const auto ps = decode::cv_dummy(data, decode::DummyStrategy::PriorSampling);
    // labels are balanced within every run, so both baselines sit at one half
    REQUIRE(mf.mean_accuracy == Catch::Approx(0.5));
    REQUIRE(ps.mean_accuracy == Catch::Approx(0.5));
    REQUIRE(mf.fold_runs == std::vector<int>{0, 1, 2});
}

TEST_CASE("labeled data and fold construction validate their input") {
    decode::LabeledData data;
    data.class_names = {"a"};
    data.x.resize(2, 1);
    data.x << 0.0, 1.0;
    data.labels = {0};
    data.run_ids = {0};
    REQUIRE_THROWS_AS(data.validate(), DataError);  // rows and labels disagree

    data.labels = {0, 1};
    data.run_ids = {0, 1};
    REQUIRE_THROWS_AS(data.validate(), DataError);  // label 1 out of range

    data.class_names = {"a", "b"};
    data.validate();
    data.run_ids = {0, 0};
    REQUIRE_THROWS_AS(decode::cv_decode(data), DataError);  // single run
    REQUIRE_THROWS_AS(decode::cv_dummy(data, decode::DummyStrategy::MostFrequent), DataError);
}
