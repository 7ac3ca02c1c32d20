#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace sdesens {

/// Mergeable running statistics (count, mean, sum of squared deviations).
/// merge() uses the pairwise update of Chan et al., so partial results from
/// concurrent workers combine associatively; merging in canonical order
/// keeps results bit-identical across worker counts.
class MCStats {
public:
    void add(double x) {
        ++n_;
        const double d = x - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_ += d * (x - mean_);
    }

    void merge(const MCStats& o) {
        if (o.n_ == 0) return;
        if (n_ == 0) {
            *this = o;
            return;
        }
        const double na = static_cast<double>(n_);
        const double nb = static_cast<double>(o.n_);
        const double d = o.mean_ - mean_;
        const double n = na + nb;
        mean_ += d * (nb / n);
        m2_ += o.m2_ + d * d * (na * nb / n);
        n_ += o.n_;
    }

    std::size_t count() const { return n_; }
    double mean() const { return mean_; }
    double m2() const { return m2_; }

    /// Unbiased sample variance.
    double variance() const {
        return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0;
    }

    /// Standard error of the mean, sqrt(variance / n).
    double std_error() const {
        return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0;
    }

private:
    std::size_t n_ = 0;
    double mean_ = 0.0;
    double m2_ = 0.0;
};

/// Least-squares line fit with standard errors of the coefficients.
struct FitResult {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    double slope_stderr = 0.0;
    double intercept_stderr = 0.0;
};

enum class FitTransform { LinLin, LogLin, LogLog };

/// Ordinary least squares of y on x after the requested coordinate
/// transform. Rejects fewer than 2 distinct x and non-positive values
/// under a log transform.
inline FitResult fit_loglinear(std::span<const double> xs, std::span<const double> ys,
                               FitTransform transform = FitTransform::LinLin) {
    if (xs.size() != ys.size())
        throw std::invalid_argument("fit_loglinear: size mismatch");
    const std::size_t n = xs.size();
    std::vector<double> tx(n), ty(n);
    const bool log_x = transform == FitTransform::LogLog;
    const bool log_y = transform != FitTransform::LinLin;
    for (std::size_t i = 0; i < n; ++i) {
        if (log_x && xs[i] <= 0.0)
            throw std::invalid_argument("fit_loglinear: non-positive x under log");
        if (log_y && ys[i] <= 0.0)
            throw std::invalid_argument("fit_loglinear: non-positive y under log");
        tx[i] = log_x ? std::log(xs[i]) : xs[i];
        ty[i] = log_y ? std::log(ys[i]) : ys[i];
    }
    bool distinct = false;
    for (std::size_t i = 1; i < n; ++i)
        if (tx[i] != tx[0]) distinct = true;
    if (n < 2 || !distinct)
        throw std::invalid_argument("fit_loglinear: need >= 2 distinct x");

    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += tx[i];
        sy += ty[i];
    }
    const double mx = sx / static_cast<double>(n);
    const double my = sy / static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (tx[i] - mx) * (tx[i] - mx);
        sxy += (tx[i] - mx) * (ty[i] - my);
        syy += (ty[i] - my) * (ty[i] - my);
    }
    FitResult fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    double ssr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = ty[i] - (fit.intercept + fit.slope * tx[i]);
        ssr += r * r;
    }
    fit.r_squared = syy > 0.0 ? 1.0 - ssr / syy : 1.0;
    if (n > 2) {
        const double s2 = ssr / static_cast<double>(n - 2);
        fit.slope_stderr = std::sqrt(s2 / sxx);
        fit.intercept_stderr =
            std::sqrt(s2 * (1.0 / static_cast<double>(n) + mx * mx / sxx));
    }
    return fit;
}

inline FitResult fit_loglinear(const std::vector<std::pair<double, double>>& pts,
                               FitTransform transform = FitTransform::LinLin) {
    std::vector<double> xs, ys;
    xs.reserve(pts.size());
    ys.reserve(pts.size());
    for (const auto& [x, y] : pts) {
        xs.push_back(x);
        ys.push_back(y);
    }
    return fit_loglinear(xs, ys, transform);
}

}  // namespace sdesens
