#include <catch2/catch_amalgamated.hpp>

#include <irnlm/stats.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

using namespace irnlm;
using encoding::GridGeometry;
using encoding::RMap;

namespace {

RMap make_map(const GridGeometry& g, const std::vector<double>& values) {
    RMap m;
    m.grid = g;
    m.values = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                                 static_cast<Eigen::Index>(values.size()));
    return m;
}

// Independent Benjamini-Hochberg oracle via monotone adjusted p-values:
// reject exactly where min over j >= rank of m * p_(j) / j is <= q.
std::vector<char> bh_adjusted_oracle(const std::vector<double>& p, double q) {
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adj(m);
    double running = std::numeric_limits<double>::infinity();
    for (std::size_t i = m; i >= 1; --i) {
        running = std::min(running, static_cast<double>(m) * p[order[i - 1]] /
                                        static_cast<double>(i));
        adj[order[i - 1]] = running;
    }
    std::vector<char> reject(m, 0);
    for (std::size_t i = 0; i < m; ++i) reject[i] = adj[i] <= q ? 1 : 0;
    return reject;
}

}  // namespace

TEST_CASE("fwhm_to_sigma halves the kernel at half the width") {
    for (double fwhm : {2.0, 6.0, 11.5}) {
        const double sigma = stats::fwhm_to_sigma(fwhm);
        const double half = fwhm / 2.0;
        REQUIRE(std::exp(-0.5 * half * half / (sigma * sigma)) ==
                Catch::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("gaussian_smooth with zero width is the identity") {
    const GridGeometry g{4, 3, 2, 2.0, 2.0, 2.0};
    RMap m;
    m.grid = g;
    m.values = Eigen::VectorXd::Random(g.n_voxels());
    const RMap out = stats::gaussian_smooth(m, 0.0);
    REQUIRE(out.values == m.values);

    REQUIRE_THROWS_AS(stats::gaussian_smooth(m, -1.0), ConfigError);
    m.values = Eigen::VectorXd::Zero(3);
    REQUIRE_THROWS_AS(stats::gaussian_smooth(m, 4.0), DataError);
}

TEST_CASE("smoothing preserves constant maps despite truncation at edges") {
    const GridGeometry g{5, 4, 3, 1.0, 1.0, 1.0};
    RMap m;
    m.grid = g;
    m.values = Eigen::VectorXd::Constant(g.n_voxels(), 2.5);
    const RMap out = stats::gaussian_smooth(m, 3.0);
    for (Eigen::Index v = 0; v < out.values.size(); ++v)
        REQUIRE(out.values(v) == Catch::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("1-d smoothing matches an explicit renormalized kernel") {
    const GridGeometry g{5, 1, 1, 1.0, 1.0, 1.0};
    const std::vector<double> values = {0.0, 1.0, 4.0, -2.0, 0.5};
    const double fwhm = 2.0;
    const RMap out = stats::gaussian_smooth(make_map(g, values), fwhm);

    const double sigma = stats::fwhm_to_sigma(fwhm);
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    for (int x = 0; x < 5; ++x) {
        double acc = 0.0, norm = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            if (x + k < 0 || x + k >= 5) continue;
            const double w = std::exp(-0.5 * k * k / (sigma * sigma));
            acc += w * values[static_cast<std::size_t>(x + k)];
            norm += w;
        }
        REQUIRE(out.values(x) == Catch::Approx(acc / norm).epsilon(1e-12));
    }
}

TEST_CASE("an interior impulse smooths symmetrically") {
    const GridGeometry g{9, 1, 1, 1.0, 1.0, 1.0};
    std::vector<double> values(9, 0.0);
    values[4] = 1.0;
    const RMap out = stats::gaussian_smooth(make_map(g, values), 2.5);
    for (int d = 1; d <= 2; ++d)
        REQUIRE(out.values(4 - d) == Catch::Approx(out.values(4 + d)).epsilon(1e-12));
    REQUIRE(out.values(4) > out.values(3));
    REQUIRE(out.values(3) > out.values(2));
}

TEST_CASE("benjamini_hochberg matches hand-worked cases") {
    REQUIRE(stats::benjamini_hochberg({0.01, 0.04, 0.03, 0.9}, 0.05) ==
            std::vector<char>{1, 0, 0, 0});
    REQUIRE(stats::benjamini_hochberg({0.01, 0.011, 0.02, 0.8}, 0.05) ==
            std::vector<char>{1, 1, 1, 0});
    REQUIRE(stats::benjamini_hochberg({0.9, 0.8, 0.95}, 0.05) ==
            std::vector<char>{0, 0, 0});
    REQUIRE(stats::benjamini_hochberg({0.0, 0.0}, 0.05) == std::vector<char>{1, 1});
}

TEST_CASE("benjamini_hochberg equals the adjusted-p oracle on random input") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        const auto m = static_cast<std::size_t>(rng.uniform_int(1, 60));
        std::vector<double> p(m);
        for (auto& v : p) {
            v = rng.uniform();
            if (rng.uniform() < 0.5) v = std::round(v * 50.0) / 50.0;  // inject ties
        }
        const double q = rng.uniform(0.01, 0.3);
        REQUIRE(stats::benjamini_hochberg(p, q) == bh_adjusted_oracle(p, q));
    }
}

TEST_CASE("benjamini_hochberg validates its input") {
    REQUIRE_THROWS_AS(stats::benjamini_hochberg({0.5}, 0.0), ConfigError);
    REQUIRE_THROWS_AS(stats::benjamini_hochberg({0.5}, 1.0), ConfigError);
    REQUIRE_THROWS_AS(stats::benjamini_hochberg({}, 0.05), DataError);
    REQUIRE_THROWS_AS(stats::benjamini_hochberg({1.5}, 0.05), DataError);
    REQUIRE_THROWS_AS(stats::benjamini_hochberg({-0.1}, 0.05), DataError);
}

TEST_CASE("the one-sample t-test matches the closed form for two degrees of freedom") {
    const auto res = stats::one_sample_t_upper({1.0, 2.0, 3.0});
    REQUIRE(res.t == Catch::Approx(2.0 * std::sqrt(3.0)).epsilon(1e-12));
    // For df = 2 the upper tail is 0.5 * (1 - t / sqrt(t^2 + 2)).
    const double expect = 0.5 * (1.0 - res.t / std::sqrt(res.t * res.t + 2.0));
    REQUIRE(res.p == Catch::Approx(expect).epsilon(1e-10));

    const auto neg = stats::one_sample_t_upper({-1.0, -2.0, -3.0});
    REQUIRE(neg.p == Catch::Approx(1.0 - expect).epsilon(1e-10));

    const auto flat_pos = stats::one_sample_t_upper({2.0, 2.0, 2.0});
    REQUIRE(flat_pos.t == std::numeric_limits<double>::infinity());
    REQUIRE(flat_pos.p == 0.0);
    const auto flat_zero = stats::one_sample_t_upper({0.0, 0.0});
    REQUIRE(flat_zero.p == 1.0);

    REQUIRE_THROWS_AS(stats::one_sample_t_upper({1.0}), DataError);
}

TEST_CASE("z_from_upper_p matches normal quantiles and survives the extremes") {
    REQUIRE(stats::z_from_upper_p(0.025) == Catch::Approx(1.959963985).epsilon(1e-8));
    REQUIRE(std::abs(stats::z_from_upper_p(0.5)) < 1e-12);
    REQUIRE(stats::z_from_upper_p(0.975) == Catch::Approx(-1.959963985).epsilon(1e-8));
    REQUIRE(stats::z_from_upper_p(0.0) > 35.0);
    REQUIRE(std::isfinite(stats::z_from_upper_p(0.0)));
    REQUIRE(stats::z_from_upper_p(1.0) < -8.0);
    REQUIRE(std::isfinite(stats::z_from_upper_p(1.0)));
}

TEST_CASE("group_test_fdr flags consistently positive voxels") {
    const GridGeometry g{4, 1, 1, 1.0, 1.0, 1.0};
    std::vector<RMap> subjects;
    for (int s = 0; s < 12; ++s) {
        // voxel 0: strong positive; 1: alternating noise; 2: negative; 3: positive
        const double noise = (s % 2 == 0) ? 0.5 : -0.5;
        subjects.push_back(make_map(
            g, {1.0 + 0.01 * s, noise, -1.0 - 0.01 * s, 0.9 + 0.02 * s}));
    }
    const auto res = stats::group_test_fdr(subjects, 0.005, 0.0);
    REQUIRE(res.mask == std::vector<char>{1, 0, 0, 1});
    REQUIRE(res.n_significant == 2);
    REQUIRE(res.z_fdr == Catch::Approx(std::min(res.z.values(0), res.z.values(3))));
    REQUIRE(res.z.values(0) > 0.0);
    REQUIRE(res.z.values(2) < 0.0);
    REQUIRE(res.pvals.size() == 4);
    REQUIRE(res.z.meta.at("kind") == "group_z");

    // No survivors leaves the threshold undefined.
    std::vector<RMap> null_subjects;
    for (int s = 0; s < 6; ++s)
        null_subjects.push_back(make_map(g, {0.1 * ((s % 2) ? 1 : -1), -0.2, 0.05 * ((s % 3) ? 1 : -1), -0.4}));
    const auto none = stats::group_test_fdr(null_subjects, 0.005, 0.0);
    REQUIRE(none.n_significant == 0);
    REQUIRE(std::isnan(none.z_fdr));

    REQUIRE_THROWS_AS(stats::group_test_fdr({subjects[0]}, 0.005, 0.0), DataError);
    auto bad = subjects;
    bad[3].grid = GridGeometry{2, 2, 1, 1.0, 1.0, 1.0};
    REQUIRE_THROWS_AS(stats::group_test_fdr(bad, 0.005, 0.0), DataError);
}

TEST_CASE("specificity is the log10 ratio where both fits are positive") {
    const GridGeometry g{4, 1, 1, 1.0, 1.0, 1.0};
    const RMap sem = make_map(g, {2.5, 0.3, 0.5, 0.0});
    const RMap syn = make_map(g, {0.25, 0.3, -0.1, 0.2});
    const auto spec = stats::specificity(sem, syn);

    REQUIRE(spec.x(0) == 1.0);  // a tenfold ratio is exactly one decade
    REQUIRE(spec.valid[0] == 1);
    REQUIRE(spec.x(1) == 0.0);  // equal fits
    REQUIRE(spec.valid[1] == 1);
    REQUIRE(spec.valid[2] == 0);  // negative syntactic fit
    REQUIRE(spec.x(2) == 0.0);
    REQUIRE(spec.valid[3] == 0);  // zero semantic fit

    RMap other = sem;
    other.grid = GridGeometry{2, 2, 1, 1.0, 1.0, 1.0};
    REQUIRE_THROWS_AS(stats::specificity(other, syn), DataError);
}

TEST_CASE("group_specificity averages per-subject log ratios over valid subjects") {
    const GridGeometry g{3, 1, 1, 1.0, 1.0, 1.0};
    const std::vector<RMap> sem = {make_map(g, {2.5, 10.0, -1.0}),
                                   make_map(g, {0.25, -1.0, -3.0})};
    const std::vector<RMap> syn = {make_map(g, {0.25, 1.0, 2.0}),
                                   make_map(g, {2.5, 1.0, 4.0})};

    const auto avg = stats::group_specificity(sem, syn, true);
    REQUIRE(avg.x(0) == Catch::Approx(0.0).margin(1e-15));  // +1 and -1 decades
    REQUIRE(avg.valid[0] == 1);
    REQUIRE(avg.x(1) == 1.0);  // only the first subject is valid
    REQUIRE(avg.valid[1] == 1);
    REQUIRE(avg.valid[2] == 0);

    const auto ratio = stats::group_specificity(sem, syn, false);
    REQUIRE(ratio.x(0) == Catch::Approx(0.0).margin(1e-15));  // means are equal
    REQUIRE(ratio.x(1) == Catch::Approx(std::log10(4.5)).epsilon(1e-12));
    REQUIRE(ratio.valid[2] == 0);  // negative mean stays invalid

    REQUIRE_THROWS_AS(stats::group_specificity({}, {}, true), DataError);
    REQUIRE_THROWS_AS(stats::group_specificity(sem, {syn[0]}, true), DataError);
}

TEST_CASE("jaccard handles identity, disjoint and empty masks") {
    REQUIRE(stats::jaccard({1, 0, 1}, {1, 0, 1}) == 1.0);
    REQUIRE(stats::jaccard({1, 1, 0}, {0, 0, 1}) == 0.0);
    REQUIRE(stats::jaccard({0, 0, 0}, {0, 0, 0}) == 1.0);
    REQUIRE(stats::jaccard({1, 1, 0}, {0, 1, 1}) == Catch::Approx(1.0 / 3.0));
    REQUIRE(stats::jaccard({1, 1, 0}, {0, 1, 1}) == stats::jaccard({0, 1, 1}, {1, 1, 0}));
    REQUIRE_THROWS_AS(stats::jaccard({1}, {1, 0}), DataError);
}

TEST_CASE("jaccard_within restricts both masks to a region first") {
    const std::vector<char> a = {1, 1, 0, 0};
    const std::vector<char> b = {0, 1, 1, 0};
    REQUIRE(stats::jaccard_within(a, b, {0, 1, 1, 1}) == 0.5);
    REQUIRE(stats::jaccard_within(a, b, {0, 0, 0, 1}) == 1.0);  // both empty inside
    REQUIRE_THROWS_AS(stats::jaccard_within(a, b, {1, 1}), DataError);
}

TEST_CASE("hemisphere masks split along x and drop an odd midline") {
    const GridGeometry odd{5, 2, 1, 1.0, 1.0, 1.0};
    const auto left = stats::hemisphere_mask(odd, true);
    const auto right = stats::hemisphere_mask(odd, false);
    int n_left = 0, n_right = 0, n_mid = 0;
    for (int v = 0; v < odd.n_voxels(); ++v) {
        int x, y, z;
        odd.coords(v, x, y, z);
        if (left[static_cast<std::size_t>(v)]) {
            ++n_left;
            REQUIRE(x < 2);
        }
        if (right[static_cast<std::size_t>(v)]) {
            ++n_right;
            REQUIRE(x > 2);
        }
        if (!left[static_cast<std::size_t>(v)] && !right[static_cast<std::size_t>(v)]) {
            ++n_mid;
            REQUIRE(x == 2);
        }
    }
    REQUIRE(n_left == 4);
    REQUIRE(n_right == 4);
    REQUIRE(n_mid == 2);

    const GridGeometry even{4, 1, 1, 1.0, 1.0, 1.0};
    const auto el = stats::hemisphere_mask(even, true);
    const auto er = stats::hemisphere_mask(even, false);
    REQUIRE(el == std::vector<char>{1, 1, 0, 0});
    REQUIRE(er == std::vector<char>{0, 0, 1, 1});
}

TEST_CASE("peak_regions keeps the ceiling of the top fraction") {
    const GridGeometry g10{10, 1, 1, 1.0, 1.0, 1.0};
    std::vector<double> v10(10);
    std::iota(v10.begin(), v10.end(), 0.0);
    const auto top1 = stats::peak_regions(make_map(g10, v10), 90.0);
    REQUIRE(std::count(top1.mask.begin(), top1.mask.end(), 1) == 1);
    REQUIRE(top1.mask[9] == 1);
    REQUIRE(top1.threshold == 9.0);
    REQUIRE_FALSE(top1.degenerate);

    // ceil(507 * 0.10) = 51 voxels when all values are distinct
    const GridGeometry g507{507, 1, 1, 1.0, 1.0, 1.0};
    std::vector<double> v507(507);
    std::iota(v507.begin(), v507.end(), 0.0);
    Rng(71).shuffle(v507);
    const auto top51 = stats::peak_regions(make_map(g507, v507), 90.0);
    REQUIRE(std::count(top51.mask.begin(), top51.mask.end(), 1) == 51);

    // Values tied with the cut are included.
    const GridGeometry g4{4, 1, 1, 1.0, 1.0, 1.0};
    const auto tied = stats::peak_regions(make_map(g4, {1.0, 2.0, 3.0, 3.0}), 75.0);
    REQUIRE(tied.mask == std::vector<char>{0, 0, 1, 1});

    const auto flat = stats::peak_regions(make_map(g4, {2.0, 2.0, 2.0, 2.0}), 90.0);
    REQUIRE(flat.degenerate);
    REQUIRE(std::count(flat.mask.begin(), flat.mask.end(), 1) == 4);

    REQUIRE_THROWS_AS(stats::peak_regions(make_map(g4, {1, 2, 3, 4}), 0.0), ConfigError);
    REQUIRE_THROWS_AS(stats::peak_regions(make_map(g4, {1, 2, 3, 4}), 100.0), ConfigError);
    RMap empty;
    REQUIRE_THROWS_AS(stats::peak_regions(empty, 90.0), DataError);
}

TEST_CASE("unique_contribution is the joint fit minus the reduced fit") {
    const GridGeometry g{2, 1, 1, 1.0, 1.0, 1.0};
    const auto u = stats::unique_contribution(make_map(g, {0.9, 0.4}), make_map(g, {0.7, 0.5}));
    REQUIRE(u.values(0) == Catch::Approx(0.2).epsilon(1e-12));
    REQUIRE(u.values(1) == Catch::Approx(-0.1).epsilon(1e-12));
    REQUIRE(u.meta.at("kind") == "unique_contribution");
}

TEST_CASE("false discoveries under the null stay near the nominal rate") {
    // 120 all-null analyses, 8 subjects x 40 voxels each. With no true
    // effects every rejection is false, so the per-analysis false discovery
    // proportion is 1 whenever anything survives; its mean must stay within
    // two standard errors of q.
    const GridGeometry g{40, 1, 1, 1.0, 1.0, 1.0};
    Rng rng(2024);
    const double q = 0.05;
    const int n_analyses = 120;
    std::vector<double> fdp(static_cast<std::size_t>(n_analyses));
    double fdp_sum = 0.0;
    for (int a = 0; a < n_analyses; ++a) {
        std::vector<RMap> subjects;
        for (int s = 0; s < 8; ++s) {
            RMap m;
            m.grid = g;
            m.values.resize(40);
            for (int v = 0; v < 40; ++v) m.values(v) = rng.normal();
            subjects.push_back(std::move(m));
        }
        const auto res = stats::group_test_fdr(subjects, q, 0.0);
        fdp[static_cast<std::size_t>(a)] = res.n_significant > 0 ? 1.0 : 0.0;
        fdp_sum += fdp[static_cast<std::size_t>(a)];
    }
    const double mean_fdp = fdp_sum / n_analyses;
    double var = 0.0;
    for (double f : fdp) var += (f - mean_fdp) * (f - mean_fdp);
    const double se = std::sqrt(var / (n_analyses - 1.0) / n_analyses);
    REQUIRE(mean_fdp <= q + 2.0 * std::max(se, 1e-3));
}
