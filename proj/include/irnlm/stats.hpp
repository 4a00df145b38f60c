#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/encoding.hpp"
#include "irnlm/io.hpp"

namespace irnlm::stats {

using encoding::GridGeometry;
using encoding::RMap;

inline double fwhm_to_sigma(double fwhm) { return fwhm / std::sqrt(8.0 * std::log(2.0)); }

namespace detail {

// Separable 1-d pass along one axis; the truncated kernel is
// renormalized at every position so edges are not darkened.
inline void smooth_axis(Eigen::VectorXd& values, const GridGeometry& g, int axis, double sigma_mm) {
    const int n_axis = axis == 0 ? g.nx : axis == 1 ? g.ny : g.nz;
    const double spacing = axis == 0 ? g.sx_mm : axis == 1 ? g.sy_mm : g.sz_mm;
    const double sigma = sigma_mm / spacing;
    if (n_axis == 1 || sigma < 1e-12) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(static_cast<std::size_t>(radius) + 1);
    for (int k = 0; k <= radius; ++k) w[static_cast<std::size_t>(k)] = std::exp(-0.5 * k * k / (sigma * sigma));

    Eigen::VectorXd out(values.size());
    const int stride = axis == 0 ? 1 : axis == 1 ? g.nx : g.nx * g.ny;
    for (int v = 0; v < g.n_voxels(); ++v) {
        int x, y, z;
        g.coords(v, x, y, z);
        const int pos = axis == 0 ? x : axis == 1 ? y : z;
        double acc = 0.0, norm = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            const int q = pos + k;
            if (q < 0 || q >= n_axis) continue;
            const double wk = w[static_cast<std::size_t>(std::abs(k))];
            acc += wk * values(v + k * stride);
            norm += wk;
        }
        out(v) = acc / norm;
    }
    values = out;
}

}  // namespace detail

inline RMap gaussian_smooth(const RMap& in, double fwhm_mm) {
    if (fwhm_mm < 0.0) throw ConfigError("fwhm must be non-negative");
    if (in.values.size() != in.grid.n_voxels()) throw DataError("map size does not match grid");
    RMap out = in;
    if (fwhm_mm == 0.0) return out;
    const double sigma_mm = fwhm_to_sigma(fwhm_mm);
    for (int axis = 0; axis < 3; ++axis) detail::smooth_axis(out.values, out.grid, axis, sigma_mm);
    return out;
}

// Step-up Benjamini-Hochberg: reject all p at or below the largest
// p_(i) with p_(i) <= q*i/m.
inline std::vector<char> benjamini_hochberg(const std::vector<double>& pvals, double q) {
    if (q <= 0.0 || q >= 1.0) throw ConfigError("fdr level must be in (0, 1)");
    const std::size_t m = pvals.size();
    if (m == 0) throw DataError("no p-values");
    for (double p : pvals)
        if (!(p >= 0.0 && p <= 1.0)) throw DataError("p-value outside [0, 1]");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
    double threshold = -1.0;
    for (std::size_t i = m; i >= 1; --i) {
        if (pvals[order[i - 1]] <= q * static_cast<double>(i) / static_cast<double>(m)) {
            threshold = pvals[order[i - 1]];
            break;
        }
    }
    std::vector<char> reject(m, 0);
    if (threshold >= 0.0)
        for (std::size_t i = 0; i < m; ++i) reject[i] = pvals[i] <= threshold ? 1 : 0;
    return reject;
}

struct TTestResult {
    double t;
    double p;  // upper tail (mean > 0)
};

inline TTestResult one_sample_t_upper(const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 2) throw DataError("t-test needs at least two subjects");
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd == 0.0) {
        // a perfectly flat sample is either definitely positive or
        // definitely not; avoid the 0/0
        if (mean > 0.0) return {std::numeric_limits<double>::infinity(), 0.0};
        return {-std::numeric_limits<double>::infinity(), 1.0};
    }
    const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
    const boost::math::students_t dist(static_cast<double>(n - 1));
    return {t, boost::math::cdf(boost::math::complement(dist, t))};
}

inline double z_from_upper_p(double p) {
    const double lo = 1e-300, hi = 1.0 - 1e-16;
    const double pc = std::min(hi, std::max(lo, p));
    const boost::math::normal dist;
    return boost::math::quantile(boost::math::complement(dist, pc));
}

struct StatMap {
    Eigen::VectorXd values;
    GridGeometry grid;
    io::json meta = io::json::object();
};

struct GroupTestResult {
    StatMap z;                 // per-voxel z equivalent of the upper-tail p
    std::vector<char> mask;    // FDR-significant voxels
    std::vector<double> pvals;
    double z_fdr = std::numeric_limits<double>::quiet_NaN();  // smallest significant z
    int n_significant = 0;
};

// Smooth each subject's map, test mean > 0 per voxel, then control FDR
// across voxels. z_fdr is the z of the weakest surviving voxel, the
// display threshold equivalent of the FDR cut.
inline GroupTestResult group_test_fdr(const std::vector<RMap>& subjects, double q,
                                      double fwhm_mm) {
    if (subjects.size() < 2) throw DataError("group test needs at least two subjects");
    const GridGeometry grid = subjects[0].grid;
    const Eigen::Index n_voxels = subjects[0].values.size();
    std::vector<RMap> smoothed;
    smoothed.reserve(subjects.size());
    for (const auto& s : subjects) {
        if (!(s.grid == grid) || s.values.size() != n_voxels)
            throw DataError("subject maps disagree in shape");
        smoothed.push_back(gaussian_smooth(s, fwhm_mm));
    }
    GroupTestResult res;
    res.z.grid = grid;
    res.z.values.resize(n_voxels);
    res.z.meta = {{"kind", "group_z"}, {"n_subjects", subjects.size()}, {"fwhm_mm", fwhm_mm}, {"q", q}};
    res.pvals.resize(static_cast<std::size_t>(n_voxels));
    std::vector<double> sample(subjects.size());
    for (Eigen::Index v = 0; v < n_voxels; ++v) {
        for (std::size_t s = 0; s < smoothed.size(); ++s) sample[s] = smoothed[s].values(v);
        const TTestResult t = one_sample_t_upper(sample);
        res.pvals[static_cast<std::size_t>(v)] = t.p;
        res.z.values(v) = z_from_upper_p(t.p);
    }
    res.mask = benjamini_hochberg(res.pvals, q);
    double z_min = std::numeric_limits<double>::infinity();
    for (Eigen::Index v = 0; v < n_voxels; ++v) {
        if (res.mask[static_cast<std::size_t>(v)]) {
            ++res.n_significant;
            z_min = std::min(z_min, res.z.values(v));
        }
    }
    if (res.n_significant > 0) res.z_fdr = z_min;
    return res;
}

struct SpecificityMap {
    Eigen::VectorXd x;         // log10(r_sem / r_syn)
    std::vector<char> valid;   // both inputs positive
    GridGeometry grid;
};

// log10 ratio of the two model fits; meaningful only where both models
// explain something, so voxels with a non-positive r are marked invalid.
inline SpecificityMap specificity(const RMap& r_sem, const RMap& r_syn) {
    if (!(r_sem.grid == r_syn.grid) || r_sem.values.size() != r_syn.values.size())
        throw DataError("specificity over maps with different shapes");
    SpecificityMap out;
    out.grid = r_sem.grid;
    const Eigen::Index n = r_sem.values.size();
    out.x = Eigen::VectorXd::Zero(n);
    out.valid.assign(static_cast<std::size_t>(n), 0);
    for (Eigen::Index v = 0; v < n; ++v) {
        const double a = r_sem.values(v), b = r_syn.values(v);
        if (a > 0.0 && b > 0.0) {
            out.x(v) = std::log10(a / b);
            out.valid[static_cast<std::size_t>(v)] = 1;
        }
    }
    return out;
}

// Group specificity: average the per-subject log ratios over the
// subjects where the ratio exists. With average_log_ratios false the
// ratio of the group-mean maps is used instead.
inline SpecificityMap group_specificity(const std::vector<RMap>& r_sem,
                                        const std::vector<RMap>& r_syn,
                                        bool average_log_ratios = true) {
    if (r_sem.empty() || r_sem.size() != r_syn.size())
        throw DataError("need matching semantic and syntactic map lists");
    const Eigen::Index n = r_sem[0].values.size();
    SpecificityMap out;
    out.grid = r_sem[0].grid;
    out.x = Eigen::VectorXd::Zero(n);
    out.valid.assign(static_cast<std::size_t>(n), 0);
    if (average_log_ratios) {
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
        Eigen::VectorXi count = Eigen::VectorXi::Zero(n);
        for (std::size_t s = 0; s < r_sem.size(); ++s) {
            const SpecificityMap m = specificity(r_sem[s], r_syn[s]);
            for (Eigen::Index v = 0; v < n; ++v) {
                if (m.valid[static_cast<std::size_t>(v)]) {
                    sum(v) += m.x(v);
                    count(v) += 1;
                }
            }
        }
        for (Eigen::Index v = 0; v < n; ++v) {
            if (count(v) > 0) {
                out.x(v) = sum(v) / count(v);
                out.valid[static_cast<std::size_t>(v)] = 1;
            }
        }
    } else {
        RMap mean_sem, mean_syn;
        mean_sem.grid = mean_syn.grid = out.grid;
        mean_sem.values = Eigen::VectorXd::Zero(n);
        mean_syn.values = Eigen::VectorXd::Zero(n);
        for (std::size_t s = 0; s < r_sem.size(); ++s) {
            mean_sem.values += r_sem[s].values;
            mean_syn.values += r_syn[s].values;
        }
        mean_sem.values /= static_cast<double>(r_sem.size());
        mean_syn.values /= static_cast<double>(r_syn.size());
        return specificity(mean_sem, mean_syn);
    }
    return out;
}

// Intersection over union of two boolean masks. Two empty masks are
// identical, so their overlap is taken as 1.
inline double jaccard(const std::vector<char>& a, const std::vector<char>& b) {
    if (a.size() != b.size()) throw DataError("jaccard over masks of different sizes");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool xa = a[i] != 0, xb = b[i] != 0;
        if (xa && xb) ++inter;
        if (xa || xb) ++uni;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double jaccard_within(const std::vector<char>& a, const std::vector<char>& b,
                             const std::vector<char>& region) {
    if (a.size() != b.size() || a.size() != region.size())
        throw DataError("jaccard over masks of different sizes");
    std::vector<char> ra(a.size(), 0), rb(b.size(), 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        ra[i] = (a[i] && region[i]) ? 1 : 0;
        rb[i] = (b[i] && region[i]) ? 1 : 0;
    }
    return jaccard(ra, rb);
}

// Left/right split along x; the exact midline column of an odd grid
// belongs to neither side.
inline std::vector<char> hemisphere_mask(const GridGeometry& g, bool left) {
    std::vector<char> mask(static_cast<std::size_t>(g.n_voxels()), 0);
    const double mid = (g.nx - 1) / 2.0;
    for (int v = 0; v < g.n_voxels(); ++v) {
        int x, y, z;
        g.coords(v, x, y, z);
        if (left ? x < mid : x > mid) mask[static_cast<std::size_t>(v)] = 1;
    }
    return mask;
}

struct PeakResult {
    std::vector<char> mask;
    double threshold;
    bool degenerate = false;  // constant map: every voxel ties at the cut
};

// The top (100 - percentile)% of the voxels: ceil of that fraction,
// plus any further voxels tied with the cut value.
inline PeakResult peak_regions(const RMap& map, double percentile = 90.0) {
    if (percentile <= 0.0 || percentile >= 100.0) throw ConfigError("percentile must be in (0, 100)");
    const Eigen::Index n = map.values.size();
    if (n == 0) throw DataError("empty map");
    std::vector<double> sorted(map.values.data(), map.values.data() + n);
    std::sort(sorted.begin(), sorted.end());
    const auto k = std::max<Eigen::Index>(
        1, static_cast<Eigen::Index>(
               std::ceil(static_cast<double>(n) * (100.0 - percentile) / 100.0 - 1e-9)));
    PeakResult res;
    res.threshold = sorted[static_cast<std::size_t>(n - k)];
    res.mask.resize(static_cast<std::size_t>(n));
    std::size_t count = 0;
    for (Eigen::Index v = 0; v < n; ++v) {
        res.mask[static_cast<std::size_t>(v)] = map.values(v) >= res.threshold ? 1 : 0;
        count += res.mask[static_cast<std::size_t>(v)];
    }
    res.degenerate = count == static_cast<std::size_t>(n);
    return res;
}

// How much a feature set adds on top of the rest: joint fit minus the
// fit without it.
inline RMap unique_contribution(const RMap& joint, const RMap& without) {
    RMap out = encoding::delta_r(joint, without);
    out.meta = {{"kind", "unique_contribution"}};
    return out;
}

}  // namespace irnlm::stats
