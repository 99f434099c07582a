#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cda/grad_check.hpp"
#include "cda/losses.hpp"
#include "cda/rng.hpp"
#include "oracles.hpp"

using namespace cda;

namespace {

double eval_nt_xent(const Tensor& z, double temperature, int k = 0) {
    Graph g;
    Value zv = g.input(z);
    const std::vector<int> positive = two_view_pairing(z.rows() / 2);
    const ContrastiveResult r = k > 0 ? nt_xent_fnr(g, zv, positive, temperature, k)
                                      : nt_xent(g, zv, positive, temperature);
    return r.loss.val().scalar_value();
}

Tensor random_embeddings(size_t rows, size_t d, Rng& rng) {
    return Tensor::uniform({rows, d}, rng, -1.0, 1.0);
}

} // namespace

TEST_CASE("cosine similarity matrix basics") {
    const std::vector<int> pairing = two_view_pairing(2);

    SUBCASE("identical rows give all ones") {
        Tensor z({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
        const SimilarityMatrix sim = cosine_similarity_matrix(z, pairing, 0.5);
        for (size_t i = 0; i < 4; ++i)
            for (size_t j = 0; j < 4; ++j) CHECK(sim.m.at(i, j) == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("orthogonal rows give zero off-diagonals") {
        Tensor z({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
        const SimilarityMatrix sim = cosine_similarity_matrix(z, pairing, 0.5);
        CHECK(sim.m.at(0, 1) == doctest::Approx(0.0));
        CHECK(sim.m.at(1, 0) == doctest::Approx(0.0));
    }

    SUBCASE("hand-computed 45 degree pair") {
        Tensor z({4, 2}, {1, 1, 1, 0, 1, 1, 1, 0});
        const SimilarityMatrix sim = cosine_similarity_matrix(z, pairing, 0.5);
        CHECK(sim.m.at(0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    }

    SUBCASE("batches below two images are rejected") {
        Tensor z({2, 2}, {1, 0, 0, 1});
        CHECK_THROWS_AS(cosine_similarity_matrix(z, {1, 0}, 0.5), std::invalid_argument);
    }
}

TEST_CASE("similarity matrix invariants on random batches") {
    Rng rng(97);
    for (int rep = 0; rep < 20; ++rep) {
        const size_t n = 3 + rep % 3;
        const Tensor z = random_embeddings(2 * n, 5, rng);
        const SimilarityMatrix sim = cosine_similarity_matrix(z, two_view_pairing(n), 0.5);
        for (size_t i = 0; i < 2 * n; ++i) {
            for (size_t j = 0; j < 2 * n; ++j) {
                CHECK(std::abs(sim.m.at(i, j)) <= 1.0 + 1e-9);
                CHECK(sim.m.at(i, j) == doctest::Approx(sim.m.at(j, i)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("per-anchor losses average to the scalar loss") {
    Rng rng(98);
    Graph g;
    Value z = g.constant(random_embeddings(8, 4, rng));
    const ContrastiveResult r = nt_xent(g, z, two_view_pairing(4), 0.5);
    REQUIRE(r.per_anchor.size() == 8);
    double mean = 0.0;
    for (size_t i = 0; i < 8; ++i) mean += r.per_anchor[i];
    mean /= 8.0;
    CHECK(r.loss.val().scalar_value() == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("nt_xent closed-form oracles") {
    SUBCASE("all four embeddings identical -> ln 3 at any temperature") {
        Tensor z({4, 3}, {0.2, -1, 0.5, 0.2, -1, 0.5, 0.2, -1, 0.5, 0.2, -1, 0.5});
        for (double t : {0.1, 0.5, 1.0, 3.0}) {
            CHECK(eval_nt_xent(z, t) == doctest::Approx(std::log(3.0)).epsilon(1e-9));
        }
    }

    SUBCASE("orthogonal duplicated positives, T=0.5 -> ln(1 + 2e^-2)") {
        Tensor z({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
        const double expect = std::log(1.0 + 2.0 * std::exp(-2.0));
        CHECK(eval_nt_xent(z, 0.5) == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("temperature must be positive") {
        Graph g;
        Value z = g.constant(Tensor({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1}));
        CHECK_THROWS_AS(nt_xent(g, z, two_view_pairing(2), 0.0), std::invalid_argument);
        CHECK_THROWS_AS(nt_xent(g, z, two_view_pairing(2), -1.0), std::invalid_argument);
    }
}

TEST_CASE("nt_xent is invariant to permuting image order") {
    Rng rng(31);
    const size_t n = 5;
    Tensor z = random_embeddings(2 * n, 4, rng);
    const double base = eval_nt_xent(z, 0.5);

    // permute images: rows (i, i+n) move together
    const std::vector<size_t> perm{3, 0, 4, 1, 2};
    Tensor pz({2 * n, 4});
    for (size_t i = 0; i < n; ++i) {
        for (size_t k = 0; k < 4; ++k) {
            pz.at(i, k) = z.at(perm[i], k);
            pz.at(i + n, k) = z.at(perm[i] + n, k);
        }
    }
    CHECK(eval_nt_xent(pz, 0.5) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("fnr_select behavior") {
    // anchor row 0 = [1, 0]; negatives at similarities 0.9, 0.1, -0.5
    // pairing: 0<->3 so candidates are rows 1, 2, 4, 5
    const double s2 = std::sqrt(2.0) / 2.0;
    (void)s2;
    Tensor z({6, 2},
             {1.0, 0.0,                    // anchor
              0.9, std::sqrt(1 - 0.81),    // sim 0.9
              0.1, std::sqrt(1 - 0.01),    // sim 0.1
              1.0, 0.0,                    // positive of 0
              -0.5, std::sqrt(1 - 0.25),   // sim -0.5
              0.0, 1.0});
    std::vector<int> positive{3, 4, 5, 0, 1, 2};
    const SimilarityMatrix sim = cosine_similarity_matrix(z, positive, 0.5);

    SUBCASE("k=0 removes nothing") { CHECK(fnr_select(sim, 0, 0).empty()); }

    SUBCASE("k=1 removes the most similar negative") {
        const auto removed = fnr_select(sim, 0, 1);
        REQUIRE(removed.size() == 1);
        CHECK(removed[0] == 1); // the 0.9 row
    }

    SUBCASE("k too large is rejected") {
        CHECK_THROWS_AS(fnr_select(sim, 0, 4), std::invalid_argument);
        CHECK_NOTHROW(fnr_select(sim, 0, 3));
    }

    SUBCASE("ties break toward the lowest index") {
        Tensor tied({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
        const SimilarityMatrix tsim = cosine_similarity_matrix(tied, two_view_pairing(2), 0.5);
        const auto removed = fnr_select(tsim, 0, 1);
        REQUIRE(removed.size() == 1);
        CHECK(removed[0] == 1); // rows 1 and 3 tie at similarity 0
    }
}

TEST_CASE("nt_xent_fnr closed-form oracles") {
    SUBCASE("k=0 equals nt_xent bit for bit") {
        Rng rng(17);
        for (int rep = 0; rep < 5; ++rep) {
            Tensor z = random_embeddings(8, 5, rng);
            CHECK(eval_nt_xent(z, 0.5, 0) == eval_nt_xent(z, 0.5));
        }
    }

    SUBCASE("all identical, k=1 -> ln 2") {
        Tensor z({4, 3}, {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3});
        for (double t : {0.25, 0.5, 2.0}) {
            CHECK(eval_nt_xent(z, t, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
        }
    }

    SUBCASE("orthogonal pairs, k=1, T=0.5 -> ln(1 + e^-2)") {
        Tensor z({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
        CHECK(eval_nt_xent(z, 0.5, 1) == doctest::Approx(std::log(1.0 + std::exp(-2.0))).epsilon(1e-9));
    }
}

TEST_CASE("fnr loss is non-increasing in k") {
    Rng rng(23);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor z = random_embeddings(8, 4, rng); // 4 images
        double prev = eval_nt_xent(z, 0.5, 0);
        for (int k = 1; k <= 5; ++k) {
            const double cur = eval_nt_xent(z, 0.5, k);
            CHECK(cur <= prev + 1e-12);
            prev = cur;
        }
    }
}

TEST_CASE("positive pair is never removed") {
    Rng rng(29);
    for (int rep = 0; rep < 200; ++rep) {
        Tensor z = random_embeddings(8, 3, rng);
        const std::vector<int> positive = two_view_pairing(4);
        const SimilarityMatrix sim = cosine_similarity_matrix(z, positive, 0.5);
        for (int anchor = 0; anchor < 8; ++anchor) {
            for (int k = 1; k <= 5; ++k) {
                for (int r : fnr_select(sim, anchor, k)) {
                    CHECK(r != anchor);
                    CHECK(r != positive[anchor]);
                }
            }
        }
    }
}

TEST_CASE("losses are invariant to positive rescaling of single rows") {
    Rng rng(37);
    Tensor z = random_embeddings(8, 4, rng);
    const double base = eval_nt_xent(z, 0.5);
    const double base_fnr = eval_nt_xent(z, 0.5, 2);

    Tensor scaled = z;
    for (size_t k = 0; k < 4; ++k) scaled.at(2, k) *= 37.5;
    for (size_t k = 0; k < 4; ++k) scaled.at(5, k) *= 1e-3;
    CHECK(eval_nt_xent(scaled, 0.5) == doctest::Approx(base).epsilon(1e-9));
    CHECK(eval_nt_xent(scaled, 0.5, 2) == doctest::Approx(base_fnr).epsilon(1e-9));
}

TEST_CASE("brute-force equivalence of the vectorized losses") {
    Rng rng(41);
    for (size_t images = 2; images <= 6; ++images) {
        for (int rep = 0; rep < 20; ++rep) {
            Tensor z = random_embeddings(2 * images, 4, rng);
            const std::vector<int> positive = two_view_pairing(images);
            const double direct = oracle::nt_xent(z, positive, 0.5);
            CHECK(std::abs(eval_nt_xent(z, 0.5) - direct) < 1e-10);
            const int k = 1 + rep % 2;
            if (2 * static_cast<int>(images) - 3 >= k) {
                const double direct_fnr = oracle::nt_xent(z, positive, 0.5, k);
                CHECK(std::abs(eval_nt_xent(z, 0.5, k) - direct_fnr) < 1e-10);
            }
        }
    }
}

TEST_CASE("cda_contrastive composes per-domain terms") {
    Rng rng(43);
    Tensor zs = random_embeddings(8, 4, rng);
    Tensor zt = random_embeddings(8, 4, rng);
    const std::vector<int> pairing = two_view_pairing(4);

    SUBCASE("identical domains double the single-domain loss") {
        Graph g;
        Value z1 = g.constant(zs);
        Value z2 = g.constant(zs);
        const DomainLossResult da = cda_contrastive(g, z1, z2, pairing, pairing, 0.5);
        const double single = eval_nt_xent(zs, 0.5);
        CHECK(da.total.val().scalar_value() == doctest::Approx(2 * single).epsilon(1e-12));
    }

    SUBCASE("all-identical embeddings in both domains -> 2 ln 3") {
        Tensor same({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
        Graph g;
        const DomainLossResult da =
            cda_contrastive(g, g.constant(same), g.constant(same), two_view_pairing(2),
                            two_view_pairing(2), 0.7);
        CHECK(da.total.val().scalar_value() == doctest::Approx(2 * std::log(3.0)).epsilon(1e-9));
    }

    SUBCASE("modifying the target never changes the source loss") {
        Graph g1;
        const DomainLossResult a =
            cda_contrastive(g1, g1.constant(zs), g1.constant(zt), pairing, pairing, 0.5);
        Tensor zt2 = zt;
        for (size_t i = 0; i < zt2.size(); ++i) zt2[i] += 0.37;
        Graph g2;
        const DomainLossResult b =
            cda_contrastive(g2, g2.constant(zs), g2.constant(zt2), pairing, pairing, 0.5);
        CHECK(a.source.val().scalar_value() == b.source.val().scalar_value());
        CHECK(a.target.val().scalar_value() != b.target.val().scalar_value());

        Graph g3;
        const DomainLossResult c = fnr_da(g3, g3.constant(zs), g3.constant(zt2), pairing, pairing, 0.5, 1);
        Graph g4;
        const DomainLossResult d = fnr_da(g4, g4.constant(zs), g4.constant(zt), pairing, pairing, 0.5, 1);
        CHECK(c.source.val().scalar_value() == d.source.val().scalar_value());
    }

    SUBCASE("fnr_da with k=0 equals cda_contrastive") {
        Graph g1, g2;
        const DomainLossResult a =
            cda_contrastive(g1, g1.constant(zs), g1.constant(zt), pairing, pairing, 0.5);
        const DomainLossResult b = fnr_da(g2, g2.constant(zs), g2.constant(zt), pairing, pairing, 0.5, 0);
        CHECK(a.total.val().scalar_value() == b.total.val().scalar_value());
    }
}

TEST_CASE("multiview loss composition") {
    Rng rng(47);
    const std::vector<int> pairing = two_view_pairing(3);
    Tensor zs12 = random_embeddings(6, 4, rng);
    Tensor zs34 = random_embeddings(6, 4, rng);
    Tensor zt12 = random_embeddings(6, 4, rng);
    Tensor zt34 = random_embeddings(6, 4, rng);

    SUBCASE("total equals the sum of four independent two-view losses") {
        Graph g;
        const MultiviewResult mv = multiview_loss(g, g.constant(zs12), g.constant(zs34),
                                                  g.constant(zt12), g.constant(zt34), 0.5, 0);
        const double expect = oracle::nt_xent(zs12, pairing, 0.5) + oracle::nt_xent(zs34, pairing, 0.5) +
                              oracle::nt_xent(zt12, pairing, 0.5) + oracle::nt_xent(zt34, pairing, 0.5);
        CHECK(mv.total.val().scalar_value() == doctest::Approx(expect).epsilon(1e-10));
    }

    SUBCASE("duplicated views 3,4 give exactly twice the two-view loss") {
        Graph g;
        const MultiviewResult mv = multiview_loss(g, g.constant(zs12), g.constant(zs12),
                                                  g.constant(zt12), g.constant(zt12), 0.5, 0);
        Graph g2;
        const DomainLossResult two =
            cda_contrastive(g2, g2.constant(zs12), g2.constant(zt12), pairing, pairing, 0.5);
        CHECK(mv.total.val().scalar_value() == 2.0 * two.total.val().scalar_value());
    }
}

TEST_CASE("mmd closed-form and symmetry") {
    SUBCASE("identical samples give zero") {
        Rng rng(53);
        Tensor z = random_embeddings(6, 3, rng);
        Graph g;
        KernelConfig cfg;
        cfg.strategy = KernelConfig::Bandwidth::median;
        Value m = mmd(g, g.constant(z), g.constant(z), cfg);
        CHECK(std::abs(m.val().scalar_value()) < 1e-12);
    }

    SUBCASE("scalar case: x=0, y=2, sigma=sqrt(2) -> 2 - 2/e") {
        Tensor a({1, 1}, {0.0});
        Tensor b({1, 1}, {2.0});
        KernelConfig cfg;
        cfg.strategy = KernelConfig::Bandwidth::fixed;
        cfg.sigma = std::sqrt(2.0);
        Graph g;
        Value m = mmd(g, g.constant(a), g.constant(b), cfg);
        CHECK(m.val().scalar_value() == doctest::Approx(2.0 - 2.0 * std::exp(-1.0)).epsilon(1e-9));
        // cross-check against the direct-summation oracle
        CHECK(m.val().scalar_value() == doctest::Approx(oracle::mmd_rbf(a, b, cfg.sigma)).epsilon(1e-12));
    }

    SUBCASE("swapping inputs changes nothing") {
        Rng rng(59);
        Tensor a = random_embeddings(5, 3, rng);
        Tensor b = random_embeddings(7, 3, rng);
        KernelConfig cfg; // median
        Graph g1, g2;
        const double ab = mmd(g1, g1.constant(a), g1.constant(b), cfg).val().scalar_value();
        const double ba = mmd(g2, g2.constant(b), g2.constant(a), cfg).val().scalar_value();
        CHECK(ab == ba);
    }

    SUBCASE("estimator stays non-negative on random inputs") {
        Rng rng(61);
        for (int rep = 0; rep < 50; ++rep) {
            Tensor a = random_embeddings(4 + rep % 3, 3, rng);
            Tensor b = random_embeddings(3 + rep % 4, 3, rng);
            for (auto strategy : {KernelConfig::Bandwidth::median, KernelConfig::Bandwidth::multi}) {
                KernelConfig cfg;
                cfg.strategy = strategy;
                Graph g;
                CHECK(mmd(g, g.constant(a), g.constant(b), cfg).val().scalar_value() >= -1e-12);
            }
        }
    }

    SUBCASE("matches the direct-summation oracle on random batches") {
        Rng rng(67);
        for (int rep = 0; rep < 10; ++rep) {
            Tensor a = random_embeddings(5, 4, rng);
            Tensor b = random_embeddings(6, 4, rng);
            KernelConfig cfg;
            cfg.strategy = KernelConfig::Bandwidth::fixed;
            cfg.sigma = 0.8 + 0.2 * rep;
            Graph g;
            const double got = mmd(g, g.constant(a), g.constant(b), cfg).val().scalar_value();
            CHECK(got == doctest::Approx(oracle::mmd_rbf(a, b, cfg.sigma)).epsilon(1e-12));
        }
    }

    SUBCASE("bad bandwidth is rejected") {
        KernelConfig cfg;
        cfg.strategy = KernelConfig::Bandwidth::fixed;
        cfg.sigma = 0.0;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
}

TEST_CASE("loss gradients pass finite-difference checks") {
    Rng rng(71);

    SUBCASE("nt_xent") {
        for (int rep = 0; rep < 10; ++rep) {
            const Tensor z = Tensor::uniform({4, 3}, rng, -1, 1);
            auto f = [](Graph& g, Value x) { return nt_xent(g, x, two_view_pairing(2), 0.5).loss; };
            CHECK(finite_difference_check(f, z, 1e-5) < 1e-4);
        }
    }

    SUBCASE("nt_xent_fnr, fixed removal sets") {
        // removal is recomputed per evaluation; random points keep the
        // ranking stable across +/- step with probability ~1
        for (int rep = 0; rep < 10; ++rep) {
            const Tensor z = Tensor::uniform({6, 3}, rng, -1, 1);
            auto f = [](Graph& g, Value x) { return nt_xent_fnr(g, x, two_view_pairing(3), 0.5, 1).loss; };
            CHECK(finite_difference_check(f, z, 1e-5) < 1e-4);
        }
    }

    SUBCASE("cda total through both domains") {
        for (int rep = 0; rep < 5; ++rep) {
            const Tensor z = Tensor::uniform({8, 3}, rng, -1, 1);
            auto f = [](Graph& g, Value x) {
                Value zs = g.slice_rows(x, 0, 4);
                Value zt = g.slice_rows(x, 4, 8);
                return cda_contrastive(g, zs, zt, two_view_pairing(2), two_view_pairing(2), 0.5).total;
            };
            CHECK(finite_difference_check(f, z, 1e-5) < 1e-4);
        }
    }

    SUBCASE("mmd with fixed bandwidth") {
        for (int rep = 0; rep < 10; ++rep) {
            const Tensor z = Tensor::uniform({7, 3}, rng, -1, 1);
            auto f = [](Graph& g, Value x) {
                KernelConfig cfg;
                cfg.strategy = KernelConfig::Bandwidth::fixed;
                cfg.sigma = 1.1;
                return mmd(g, g.slice_rows(x, 0, 3), g.slice_rows(x, 3, 7), cfg);
            };
            CHECK(finite_difference_check(f, z, 1e-5) < 1e-4);
        }
    }

    SUBCASE("multiview total") {
        const Tensor z = Tensor::uniform({8, 3}, rng, -1, 1);
        auto f = [](Graph& g, Value x) {
            Value a = g.slice_rows(x, 0, 4);
            Value b = g.slice_rows(x, 4, 8);
            return multiview_loss(g, a, b, a, b, 0.5, 0).total;
        };
        CHECK(finite_difference_check(f, z, 1e-5) < 1e-4);
    }
}
