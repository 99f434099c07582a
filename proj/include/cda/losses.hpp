#pragma once

#include <vector>

#include "cda/graph.hpp"

namespace cda {

// positive[i] is the index of anchor i's positive; an involution with no
// fixed points. Two-view batches stack views as [view1; view2], so i pairs
// with i +/- N.
std::vector<int> two_view_pairing(size_t n);

// Eager cosine similarities with their pairing, used for false-negative
// selection and by tests.
struct SimilarityMatrix {
    Tensor m; // (2N, 2N)
    std::vector<int> positive;
    double temperature = 0.5;

    size_t size() const { return m.rows(); }
};

SimilarityMatrix cosine_similarity_matrix(const Tensor& z, const std::vector<int>& positive,
                                          double temperature, double eps = 1e-12);

// The k negatives most similar to the anchor, excluding the anchor itself
// and its positive. Ties break toward the lowest index.
std::vector<int> fnr_select(const SimilarityMatrix& sim, int anchor, int k);

struct ContrastiveResult {
    Value loss;        // scalar node
    Tensor per_anchor; // (2N) forward values
    std::vector<std::vector<int>> removed; // per-anchor removal sets (fnr only)
};

// Temperature-scaled contrastive loss over one domain's 2N embeddings:
// mean over anchors of -log(exp(s_ij/T) / sum_{k != i} exp(s_ik/T)).
ContrastiveResult nt_xent(Graph& g, Value z, const std::vector<int>& positive, double temperature);

// Same loss with the k most anchor-similar negatives removed from each
// anchor's denominator. k = 0 reproduces nt_xent exactly.
ContrastiveResult nt_xent_fnr(Graph& g, Value z, const std::vector<int>& positive, double temperature,
                              int k);

struct DomainLossResult {
    Value source;
    Value target;
    Value total;
};

// Per-domain contrastive learning: no cross-domain pair is ever formed.
DomainLossResult cda_contrastive(Graph& g, Value z_source, Value z_target,
                                 const std::vector<int>& positive_s, const std::vector<int>& positive_t,
                                 double temperature);

DomainLossResult fnr_da(Graph& g, Value z_source, Value z_target, const std::vector<int>& positive_s,
                        const std::vector<int>& positive_t, double temperature, int k);

struct MultiviewResult {
    Value total;
    Value source_a, source_b, target_a, target_b;
};

// Four-view objective: per domain, two independent two-view losses over
// the disjoint pairs (v1,v2) and (v3,v4). Each z argument stacks one pair.
MultiviewResult multiview_loss(Graph& g, Value zs_12, Value zs_34, Value zt_12, Value zt_34,
                               double temperature, int k);

struct KernelConfig {
    enum class Bandwidth { fixed, median, multi };
    Bandwidth strategy = Bandwidth::median;
    double sigma = 1.0; // fixed strategy only

    void validate() const;
};

// Median pairwise squared distance over the joint batch; the default
// bandwidth source. Floored at 1e-12.
double median_sq_distance(const Tensor& a, const Tensor& b);

// Biased squared-MMD estimate with an RBF kernel, diagonal terms included:
// mean k(s,s') - 2 mean k(s,t) + mean k(t,t'). Differentiable w.r.t. both
// inputs; the bandwidth is treated as a constant of the step.
Value mmd(Graph& g, Value z_source, Value z_target, const KernelConfig& cfg);

} // namespace cda
