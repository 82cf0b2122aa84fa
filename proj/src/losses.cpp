#include "dadm/losses.hpp"

#include <set>
#include <string>

#include "dadm/errors.hpp"
#include "dadm/ops.hpp"

namespace dadm {

void AngleLossParams::validate() const {
    if (!(0.0 < tau_spoof && tau_spoof <= tau_live && tau_live <= 1.0))
        throw ConfigError("angle loss: need 0 < tau_spoof <= tau_live <= 1");
}

namespace {

constexpr std::array<std::pair<int, int>, 3> kModalityPairs{{{0, 1}, {0, 2}, {1, 2}}};

/// Sum over the entries of `x` selected by the 0/1 mask.
Var masked_sum(Tape& t, const Var& x, const Tensor& mask) { return ops::sum(ops::mul(x, t.constant(mask))); }

}  // namespace

std::optional<Var> angle_loss(const ModalityFeatures& batch, const AngleLossParams& params) {
    params.validate();
    const std::size_t b = batch.labels.size();
    if (batch.envs.size() != b) throw ShapeError("angle_loss: labels and envs differ in length");
    for (const Var& f : batch.features)
        if (f.shape().size() != 2 || f.shape()[0] != b)
            throw ShapeError("angle_loss: features must be (B, d) with B = " + std::to_string(b));
    if (std::set<int>(batch.envs.begin(), batch.envs.end()).size() < 2) return std::nullopt;

    Tape& t = *batch.features[0].tape();
    Tensor live(Shape{b, b}), spoof(Shape{b, b}), same(Shape{b, b});
    double n_live = 0, n_spoof = 0, n_same = 0;
    for (std::size_t a = 0; a < b; ++a)
        for (std::size_t c = a + 1; c < b; ++c) {
            if (batch.envs[a] == batch.envs[c] || batch.labels[a] != batch.labels[c]) continue;
            same[a * b + c] = 1.0;
            ++n_same;
            if (batch.labels[a] == 1) {
                live[a * b + c] = 1.0;
                ++n_live;
            } else {
                spoof[a * b + c] = 1.0;
                ++n_spoof;
            }
        }
    const double count = 3.0 * (n_live + n_spoof + n_same);
    if (count == 0.0) return std::nullopt;

    std::array<Var, 3> unit;
    for (std::size_t m = 0; m < 3; ++m) unit[m] = ops::l2_normalize_rows(batch.features[m]);

    std::vector<Var> parts;
    for (std::size_t m = 0; m < 3; ++m) {
        Var gram = ops::matmul(unit[m], unit[m], false, true);
        if (n_live > 0) parts.push_back(masked_sum(t, ops::square(ops::add_scalar(gram, -params.tau_live)), live));
        if (n_spoof > 0) parts.push_back(masked_sum(t, ops::square(ops::add_scalar(gram, -params.tau_spoof)), spoof));
    }
    if (n_same > 0)
        for (auto [i, j] : kModalityPairs)
            parts.push_back(masked_sum(t, ops::pairwise_sqdiff(ops::row_dot(unit[i], unit[j])), same));

    Var total = parts.front();
    for (std::size_t k = 1; k < parts.size(); ++k) total = ops::add(total, parts[k]);
    return ops::scale(total, 1.0 / count);
}

Var ce_loss(const Var& logits, const std::vector<int>& labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[1] != 2 || s[0] != labels.size())
        throw ShapeError("ce_loss: logits " + shape_str(s) + " do not match " + std::to_string(labels.size()) +
                         " binary labels");
    Tensor pick(s);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ShapeError("ce_loss: labels must be 0 or 1");
        pick[i * 2 + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    Tape& t = *logits.tape();
    Var nll = ops::sum(ops::mul(ops::log_softmax_rows(logits), t.constant(pick)));
    return ops::scale(nll, -1.0 / static_cast<double>(labels.size()));
}

Var total_loss(const Var& ce, const Var& mi, const std::optional<Var>& angle, const LossWeights& w) {
    if (w.lambda_mi < 0.0 || w.lambda_angle < 0.0) throw ConfigError("total_loss: coefficients must be >= 0");
    Var total = ops::add(ce, ops::scale(mi, w.lambda_mi));
    if (angle) total = ops::add(total, ops::scale(*angle, w.lambda_angle));
    return total;
}

}  // namespace dadm
