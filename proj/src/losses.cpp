#include "cda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cda/errors.hpp"

namespace cda {

std::vector<int> two_view_pairing(size_t n) {
    std::vector<int> positive(2 * n);
    for (size_t i = 0; i < n; ++i) {
        positive[i] = static_cast<int>(i + n);
        positive[i + n] = static_cast<int>(i);
    }
    return positive;
}

namespace {

void check_pairing(size_t rows, const std::vector<int>& positive) {
    if (positive.size() != rows) {
        throw std::invalid_argument("contrastive: pairing size " + std::to_string(positive.size()) +
                                    " does not match " + std::to_string(rows) + " embeddings");
    }
    for (size_t i = 0; i < rows; ++i) {
        const int p = positive[i];
        if (p < 0 || p >= static_cast<int>(rows) || p == static_cast<int>(i) ||
            positive[p] != static_cast<int>(i)) {
            throw std::invalid_argument("contrastive: anchor " + std::to_string(i) +
                                        " lacks exactly one positive");
        }
    }
}

void check_batch(const Tensor& z) {
    if (z.rank() != 2 || z.rows() < 4 || z.cols() < 2) {
        throw std::invalid_argument("contrastive: need at least two images (4 embeddings) of dim >= 2, got " +
                                    shape_str(z.shape()));
    }
}

// Shared tail of both contrastive variants: masked softmax denominators
// over exp(sim / T). The denominator mask carries the k != i indicator and,
// for FNR, the removal sets; masks are constants of the step, so gradients
// flow only through retained similarities.
ContrastiveResult masked_nt_xent(Graph& g, Value sim, const std::vector<int>& positive,
                                 double temperature, const std::vector<std::vector<int>>& removed) {
    const size_t rows = sim.val().rows();
    Tensor pos_mask({rows, rows});
    Tensor den_mask = Tensor::full({rows, rows}, 1.0);
    for (size_t i = 0; i < rows; ++i) {
        pos_mask.at(i, positive[i]) = 1.0;
        den_mask.at(i, i) = 0.0;
    }
    for (size_t i = 0; i < removed.size(); ++i) {
        for (int r : removed[i]) den_mask.at(i, r) = 0.0;
    }

    Value e = g.exp(g.scalar_div(sim, temperature));
    Value num = g.sum(g.mul(e, g.constant(std::move(pos_mask))), 1);
    Value den = g.sum(g.mul(e, g.constant(std::move(den_mask))), 1);
    Value per_anchor = g.sub(g.log(den), g.log(num));

    ContrastiveResult result;
    result.loss = g.mean(per_anchor);
    result.per_anchor = per_anchor.val();
    result.removed = removed;
    return result;
}

Value cosine_matrix_node(Graph& g, Value z) {
    Value zn = g.l2_normalize_rows(z);
    return g.matmul(zn, g.transpose(zn));
}

} // namespace

SimilarityMatrix cosine_similarity_matrix(const Tensor& z, const std::vector<int>& positive,
                                          double temperature, double eps) {
    check_batch(z);
    check_pairing(z.rows(), positive);
    const size_t n = z.rows(), d = z.cols();
    std::vector<double> inv_norm(n);
    for (size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (size_t j = 0; j < d; ++j) sq += z.at(i, j) * z.at(i, j);
        inv_norm[i] = 1.0 / std::max(std::sqrt(sq), eps);
    }
    SimilarityMatrix sim;
    sim.m = Tensor({n, n});
    sim.positive = positive;
    sim.temperature = temperature;
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (size_t k = 0; k < d; ++k) dot += z.at(i, k) * z.at(j, k);
            sim.m.at(i, j) = dot * inv_norm[i] * inv_norm[j];
        }
    }
    return sim;
}

std::vector<int> fnr_select(const SimilarityMatrix& sim, int anchor, int k) {
    const int rows = static_cast<int>(sim.size());
    const int max_k = rows - 3; // leave at least one negative
    if (k < 0 || k > max_k) {
        throw std::invalid_argument("fnr_select: k=" + std::to_string(k) + " out of range [0, " +
                                    std::to_string(max_k) + "] for batch of " + std::to_string(rows));
    }
    if (k == 0) return {};
    std::vector<int> candidates;
    candidates.reserve(rows - 2);
    for (int j = 0; j < rows; ++j) {
        if (j == anchor || j == sim.positive[anchor]) continue;
        candidates.push_back(j);
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        const double sa = sim.m.at(anchor, a);
        const double sb = sim.m.at(anchor, b);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    candidates.resize(k);
    return candidates;
}

ContrastiveResult nt_xent(Graph& g, Value z, const std::vector<int>& positive, double temperature) {
    if (temperature <= 0.0) throw std::invalid_argument("nt_xent: temperature must be > 0");
    check_batch(z.val());
    check_pairing(z.val().rows(), positive);
    Value sim = cosine_matrix_node(g, z);
    return masked_nt_xent(g, sim, positive, temperature, {});
}

ContrastiveResult nt_xent_fnr(Graph& g, Value z, const std::vector<int>& positive, double temperature,
                              int k) {
    if (temperature <= 0.0) throw std::invalid_argument("nt_xent: temperature must be > 0");
    check_batch(z.val());
    check_pairing(z.val().rows(), positive);
    Value sim = cosine_matrix_node(g, z);
    const size_t rows = z.val().rows();
    std::vector<std::vector<int>> removed(rows);
    if (k > 0) {
        SimilarityMatrix eager{sim.val(), positive, temperature};
        for (size_t i = 0; i < rows; ++i) {
            removed[i] = fnr_select(eager, static_cast<int>(i), k);
        }
    }
    return masked_nt_xent(g, sim, positive, temperature, removed);
}

DomainLossResult cda_contrastive(Graph& g, Value z_source, Value z_target,
                                 const std::vector<int>& positive_s, const std::vector<int>& positive_t,
                                 double temperature) {
    ContrastiveResult s = nt_xent(g, z_source, positive_s, temperature);
    ContrastiveResult t = nt_xent(g, z_target, positive_t, temperature);
    return {s.loss, t.loss, g.add(s.loss, t.loss)};
}

DomainLossResult fnr_da(Graph& g, Value z_source, Value z_target, const std::vector<int>& positive_s,
                        const std::vector<int>& positive_t, double temperature, int k) {
    ContrastiveResult s = nt_xent_fnr(g, z_source, positive_s, temperature, k);
    ContrastiveResult t = nt_xent_fnr(g, z_target, positive_t, temperature, k);
    return {s.loss, t.loss, g.add(s.loss, t.loss)};
}

MultiviewResult multiview_loss(Graph& g, Value zs_12, Value zs_34, Value zt_12, Value zt_34,
                               double temperature, int k) {
    auto pair_loss = [&](Value z) {
        const size_t rows = z.val().rows();
        if (rows % 2 != 0) throw std::invalid_argument("multiview_loss: odd embedding count");
        const std::vector<int> positive = two_view_pairing(rows / 2);
        return k > 0 ? nt_xent_fnr(g, z, positive, temperature, k).loss
                     : nt_xent(g, z, positive, temperature).loss;
    };
    MultiviewResult r;
    r.source_a = pair_loss(zs_12);
    r.source_b = pair_loss(zs_34);
    r.target_a = pair_loss(zt_12);
    r.target_b = pair_loss(zt_34);
    r.total = g.add(g.add(r.source_a, r.source_b), g.add(r.target_a, r.target_b));
    return r;
}

void KernelConfig::validate() const {
    if (strategy == Bandwidth::fixed && sigma <= 0.0) {
        throw std::invalid_argument("mmd: bandwidth must be > 0");
    }
}

double median_sq_distance(const Tensor& a, const Tensor& b) {
    const size_t d = a.cols();
    std::vector<const Tensor*> parts{&a, &b};
    std::vector<std::pair<const double*, size_t>> rows;
    for (const Tensor* t : parts) {
        for (size_t i = 0; i < t->rows(); ++i) rows.emplace_back(t->data() + i * d, d);
    }
    std::vector<double> dists;
    dists.reserve(rows.size() * (rows.size() - 1) / 2);
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t j = i + 1; j < rows.size(); ++j) {
            double acc = 0.0;
            for (size_t kk = 0; kk < d; ++kk) {
                const double diff = rows[i].first[kk] - rows[j].first[kk];
                acc += diff * diff;
            }
            dists.push_back(acc);
        }
    }
    if (dists.empty()) return 1.0;
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    return std::max(dists[dists.size() / 2], 1e-12);
}

Value mmd(Graph& g, Value z_source, Value z_target, const KernelConfig& cfg) {
    cfg.validate();
    const Tensor& zs = z_source.val();
    const Tensor& zt = z_target.val();
    if (zs.rank() != 2 || zt.rank() != 2 || zs.cols() != zt.cols()) {
        throw std::invalid_argument("mmd: expected (N,d) and (M,d), got " + shape_str(zs.shape()) +
                                    " and " + shape_str(zt.shape()));
    }

    std::vector<double> sigmas;
    switch (cfg.strategy) {
        case KernelConfig::Bandwidth::fixed:
            sigmas = {cfg.sigma};
            break;
        case KernelConfig::Bandwidth::median:
            sigmas = {std::sqrt(0.5 * median_sq_distance(zs, zt))};
            break;
        case KernelConfig::Bandwidth::multi: {
            const double s = std::sqrt(0.5 * median_sq_distance(zs, zt));
            sigmas = {0.5 * s, s, 2.0 * s};
            break;
        }
    }

    Value d_ss = g.sq_euclidean_cdist(z_source, z_source);
    Value d_st = g.sq_euclidean_cdist(z_source, z_target);
    Value d_ts = g.sq_euclidean_cdist(z_target, z_source);
    Value d_tt = g.sq_euclidean_cdist(z_target, z_target);

    Value acc{nullptr, -1};
    for (double sigma : sigmas) {
        const double denom = -2.0 * sigma * sigma;
        Value m_ss = g.mean(g.exp(g.scalar_div(d_ss, denom)));
        Value m_tt = g.mean(g.exp(g.scalar_div(d_tt, denom)));
        // Cross term averaged over both orientations: IEEE addition is
        // commutative, so mmd(A, B) and mmd(B, A) are bit-identical.
        Value m_st = g.mean(g.exp(g.scalar_div(d_st, denom)));
        Value m_ts = g.mean(g.exp(g.scalar_div(d_ts, denom)));
        Value cross = g.add(m_st, m_ts);
        Value one = g.sub(g.add(m_ss, m_tt), cross);
        acc = acc.graph ? g.add(acc, one) : one;
    }
    if (sigmas.size() > 1) acc = g.scalar_div(acc, static_cast<double>(sigmas.size()));
    return acc;
}

} // namespace cda
