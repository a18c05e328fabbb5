#include "bevdiff/losses.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace bevdiff {

namespace {
constexpr double kProbClamp = 1e-7;
}

void validate(const LossWeights& w) {
    for (double v : {w.lambda_diff, w.lambda_seg, w.lambda_det, w.lambda_cls, w.lambda_reg, w.focal_gamma})
        if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
    if (!(w.focal_alpha >= 0 && w.focal_alpha <= 1)) throw std::invalid_argument("loss.focal_alpha must be in [0, 1]");
}

double diffusion_loss(const Tensor& pred_x0, const Tensor& target_x0) {
    require_same_shape(pred_x0, target_x0, "diffusion_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < pred_x0.size(); ++i) {
        const double d = pred_x0[i] - target_x0[i];
        s += d * d;
    }
    return s / static_cast<double>(pred_x0.size());
}

Var diffusion_loss(Var pred_x0, const Tensor& target_x0) {
    require_same_shape(pred_x0.value(), target_x0, "diffusion_loss");
    return mse(pred_x0, pred_x0.tape().constant(target_x0));
}

double focal_loss(double prob, bool is_positive, double alpha, double gamma) {
    const double p = std::clamp(prob, kProbClamp, 1.0 - kProbClamp);
    if (is_positive) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

double focal_loss_map(const Tensor& prob, const Tensor& target, double alpha, double gamma) {
    require_same_shape(prob, target, "focal_loss_map");
    double s = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i) s += focal_loss(prob[i], target[i] > 0.5, alpha, gamma);
    return s / static_cast<double>(prob.size());
}

double smooth_l1(double x) {
    const double a = std::abs(x);
    return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

namespace {

// Shortest augmenting path with potentials; requires rows <= cols. Returns the column of each row.
std::vector<int> solve_rows_le_cols(const CostMatrix& c) {
    const int n = c.rows, m = c.cols;
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

}  // namespace

Assignment hungarian_match(const CostMatrix& cost) {
    if (cost.rows < 1 || cost.cols < 1) throw std::invalid_argument("hungarian_match: cost matrix must be at least 1x1");
    if (cost.values.size() != static_cast<std::size_t>(cost.rows) * cost.cols)
        throw std::invalid_argument("hungarian_match: cost storage does not match its dimensions");
    for (std::size_t i = 0; i < cost.values.size(); ++i)
        if (!std::isfinite(cost.values[i]))
            throw std::invalid_argument("hungarian_match: non-finite cost at (" + std::to_string(i / cost.cols) + ", " +
                                        std::to_string(i % cost.cols) + ")");

    Assignment a;
    if (cost.rows <= cost.cols) {
        const auto cols = solve_rows_le_cols(cost);
        for (int i = 0; i < cost.rows; ++i) a.pairs.emplace_back(i, cols[i]);
    } else {
        CostMatrix t(cost.cols, cost.rows);
        for (int i = 0; i < cost.rows; ++i)
            for (int j = 0; j < cost.cols; ++j) t(j, i) = cost(i, j);
        const auto rows = solve_rows_le_cols(t);
        for (int j = 0; j < cost.cols; ++j) a.pairs.emplace_back(rows[j], j);
        std::sort(a.pairs.begin(), a.pairs.end());
    }
    std::vector<char> matched(cost.rows, 0);
    for (const auto& [i, j] : a.pairs) {
        matched[i] = 1;
        a.cost += cost(i, j);
    }
    for (int i = 0; i < cost.rows; ++i)
        if (!matched[i]) a.unmatched.push_back(i);
    return a;
}

int BoxPrediction::label() const {
    if (logits.empty()) throw std::invalid_argument("BoxPrediction has no class logits");
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::array<double, 5> box_params(double cx, double cy, double w, double h, double heading) {
    if (!(w > 0) || !(h > 0)) throw std::invalid_argument("box size must be positive");
    return {cx, cy, std::log(w), std::log(h), heading};
}

namespace {

double prob_of(double logit) { return 1.0 / (1.0 + std::exp(-logit)); }

void check_classes(const std::vector<BoxPrediction>& preds, const std::vector<GtBox>& gts) {
    if (preds.empty()) return;
    const std::size_t n_cls = preds.front().logits.size();
    if (n_cls == 0) throw std::invalid_argument("detection: predictions carry no class logits");
    for (const auto& p : preds)
        if (p.logits.size() != n_cls) throw std::invalid_argument("detection: inconsistent class-logit counts");
    for (const auto& g : gts)
        if (g.cls < 0 || static_cast<std::size_t>(g.cls) >= n_cls)
            throw std::out_of_range("detection: ground-truth class " + std::to_string(g.cls) + " out of range");
}

}  // namespace

CostMatrix detection_cost(const std::vector<BoxPrediction>& preds, const std::vector<GtBox>& gts, const LossWeights& w) {
    check_classes(preds, gts);
    CostMatrix c(static_cast<int>(preds.size()), static_cast<int>(gts.size()));
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& p = preds[i];
        const auto pp = box_params(p.cx, p.cy, p.w, p.h, p.heading);
        for (std::size_t j = 0; j < gts.size(); ++j) {
            const auto& g = gts[j];
            const auto gp = box_params(g.cx, g.cy, g.w, g.h, g.heading);
            const double prob = prob_of(p.logits[g.cls]);
            const double cls = focal_loss(prob, true, w.focal_alpha, w.focal_gamma) -
                               focal_loss(prob, false, w.focal_alpha, w.focal_gamma);
            double l1 = 0.0;
            for (int k = 0; k < 5; ++k) l1 += std::abs(pp[k] - gp[k]);
            c(static_cast<int>(i), static_cast<int>(j)) = w.lambda_cls * cls + w.lambda_reg * l1;
        }
    }
    return c;
}

double detection_loss(const std::vector<BoxPrediction>& preds, const std::vector<GtBox>& gts, const LossWeights& w) {
    check_classes(preds, gts);
    if (preds.empty()) return 0.0;
    const std::size_t n_cls = preds.front().logits.size();
    std::vector<int> target_of(preds.size(), -1);
    std::vector<std::pair<int, int>> pairs;
    if (!gts.empty()) {
        pairs = hungarian_match(detection_cost(preds, gts, w)).pairs;
        for (const auto& [i, j] : pairs) target_of[i] = j;
    }
    const double norm = std::max<double>(1.0, static_cast<double>(pairs.size()));

    double cls = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t c = 0; c < n_cls; ++c) {
            const bool pos = target_of[i] >= 0 && gts[target_of[i]].cls == static_cast<int>(c);
            cls += focal_loss(prob_of(preds[i].logits[c]), pos, w.focal_alpha, w.focal_gamma);
        }
    double reg = 0.0;
    for (const auto& [i, j] : pairs) {
        const auto& p = preds[i];
        const auto& g = gts[j];
        const auto pp = box_params(p.cx, p.cy, p.w, p.h, p.heading);
        const auto gp = box_params(g.cx, g.cy, g.w, g.h, g.heading);
        for (int k = 0; k < 5; ++k) reg += smooth_l1(pp[k] - gp[k]);
    }
    return w.lambda_cls * cls / norm + w.lambda_reg * reg / norm;
}

double total_loss(double l_diff, double l_seg, double l_det, const LossWeights& w) {
    return w.lambda_diff * l_diff + w.lambda_seg * l_seg + w.lambda_det * l_det;
}

Var total_loss(Var l_diff, Var l_seg, Var l_det, const LossWeights& w) {
    return add(add(scale(l_diff, w.lambda_diff), scale(l_seg, w.lambda_seg)), scale(l_det, w.lambda_det));
}

}  // namespace bevdiff
