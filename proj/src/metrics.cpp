#include "dadm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dadm/errors.hpp"

namespace dadm {

namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ConfigError("metrics: scores and labels differ in length");
    std::size_t live = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ConfigError("metrics: labels must be 0 or 1");
        live += static_cast<std::size_t>(l);
    }
    if (live == 0 || live == labels.size()) throw ConfigError("metrics: both classes must be present");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericError("metrics: non-finite score");
}

}  // namespace

std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_inputs(scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double n_live = 0.0, n_spoof = 0.0;
    for (int l : labels) (l == 1 ? n_live : n_spoof) += 1.0;

    std::vector<RocPoint> roc;
    // Walking thresholds upwards: everything below the current threshold is rejected.
    double live_below = 0.0, spoof_below = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double thr = scores[order[i]];
        roc.push_back({(n_spoof - spoof_below) / n_spoof, live_below / n_live, thr});
        while (i < order.size() && scores[order[i]] == thr) {
            (labels[order[i]] == 1 ? live_below : spoof_below) += 1.0;
            ++i;
        }
    }
    roc.push_back({0.0, 1.0, std::numeric_limits<double>::infinity()});
    return roc;
}

double auc_from_roc(const std::vector<RocPoint>& roc) {
    double area = 0.0;
    for (std::size_t k = 1; k < roc.size(); ++k) {
        const double dx = roc[k - 1].far - roc[k].far;
        area += dx * ((1.0 - roc[k - 1].frr) + (1.0 - roc[k].frr)) * 0.5;
    }
    return area;
}

double min_hter_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto roc = roc_curve(scores, labels);
    std::size_t best = 0;
    for (std::size_t k = 1; k < roc.size(); ++k)
        if (roc[k].far + roc[k].frr < roc[best].far + roc[best].frr) best = k;
    return roc[best].threshold;
}

Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
    Metrics m;
    m.roc = roc_curve(scores, labels);
    m.auc = auc_from_roc(m.roc);
    double n_live = 0.0, n_spoof = 0.0, fa = 0.0, fr = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool accept = scores[i] >= threshold;
        if (labels[i] == 1) {
            n_live += 1.0;
            fr += accept ? 0.0 : 1.0;
        } else {
            n_spoof += 1.0;
            fa += accept ? 1.0 : 0.0;
        }
    }
    m.far = fa / n_spoof;
    m.frr = fr / n_live;
    m.hter = 0.5 * (m.far + m.frr);
    m.threshold = threshold;
    std::size_t eq = 0;
    for (std::size_t k = 1; k < m.roc.size(); ++k)
        if (std::abs(m.roc[k].far - m.roc[k].frr) < std::abs(m.roc[eq].far - m.roc[eq].frr)) eq = k;
    m.eer = 0.5 * (m.roc[eq].far + m.roc[eq].frr);
    return m;
}

Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels) {
    return compute_metrics(scores, labels, min_hter_threshold(scores, labels));
}

}  // namespace dadm
