#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "pronoun/evalstat.hpp"
#include "pronoun/rng.hpp"

using namespace pronoun;

namespace {

struct Instance {
    std::vector<int> labels;
    std::vector<double> scores;
};

// Coarse score grid forces plenty of ties.
Instance random_instance(Rng& rng, std::size_t n, int levels) {
    Instance inst;
    for (std::size_t i = 0; i < n; ++i) {
        inst.labels.push_back(static_cast<int>(rng.below(2)));
        inst.scores.push_back(static_cast<double>(rng.below(static_cast<std::uint64_t>(levels))) / levels);
    }
    inst.labels[0] = 1;
    inst.labels[1] = 0;
    return inst;
}

} // namespace

TEST(ClassificationMetrics, AllCorrect) {
    std::vector<int> y{1, 0, 1, 0};
    std::vector<double> p{0.9, 0.1, 0.7, 0.2};
    const auto r = classification_metrics(y, p);
    EXPECT_DOUBLE_EQ(r.f1_macro, 1.0);
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(*r.auroc, 1.0);
}

TEST(ClassificationMetrics, HandConfusionMatrix) {
    std::vector<int> y{1, 1, 0, 0};
    std::vector<double> p{0.9, 0.4, 0.6, 0.1};
    const auto r = classification_metrics(y, p);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
    EXPECT_DOUBLE_EQ(r.f1_positive, 0.5);
    EXPECT_DOUBLE_EQ(r.f1_macro, 0.5);
    EXPECT_EQ(r.n_pos, 2u);
    EXPECT_EQ(r.n_neg, 2u);
}

TEST(ClassificationMetrics, NoPositivesAnywhereGivesZeroPositiveF1) {
    std::vector<int> y{0, 0, 0};
    std::vector<double> p{0.1, 0.2, 0.3};
    const auto r = classification_metrics(y, p);
    EXPECT_EQ(r.f1_positive, 0.0);
    EXPECT_EQ(r.f1_negative, 1.0);
    EXPECT_FALSE(r.auroc.has_value());
    EXPECT_FALSE(r.auprc.has_value());
}

TEST(ClassificationMetrics, ThresholdZeroCallsEverythingPositive) {
    Rng rng(3);
    auto inst = random_instance(rng, 50, 7);
    const auto r = classification_metrics(inst.labels, inst.scores, 0.0);
    EXPECT_EQ(r.recall_positive, 1.0);
}

TEST(ClassificationMetrics, EmptyInputThrows) {
    std::vector<int> y;
    std::vector<double> p;
    EXPECT_THROW(classification_metrics(y, p), DataQualityError);
}

TEST(Auroc, PerfectAndAllTied) {
    std::vector<int> y{0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auroc(y, std::vector<double>{0.1, 0.2, 0.3, 0.4}), 1.0);
    EXPECT_DOUBLE_EQ(auroc(y, std::vector<double>{0.5, 0.5, 0.5, 0.5}), 0.5);
}

TEST(Auroc, OneClassThrows) {
    std::vector<int> y{1, 1};
    EXPECT_THROW(auroc(y, std::vector<double>{0.1, 0.2}), UndefinedStatisticError);
}

TEST(Auroc, MatchesKnownValue) {
    // sklearn.metrics.roc_auc_score on the same data.
    std::vector<int> y{1, 0, 1, 1, 0, 0, 1, 0};
    std::vector<double> s{0.9, 0.8, 0.8, 0.6, 0.5, 0.5, 0.3, 0.1};
    EXPECT_NEAR(auroc(y, s), 0.71875, 1e-15);
    EXPECT_NEAR(auprc(y, s), 0.7470238095238095, 1e-15);
}

TEST(Auroc, Random40PointInstanceEqualsPairEnumeration) {
    Rng rng(40);
    const auto inst = random_instance(rng, 40, 1000);
    EXPECT_EQ(auroc(inst.labels, inst.scores), oracle::auroc_pairs(inst.labels, inst.scores));
}

TEST(Auroc, ComplementForTieFreeScores) {
    Rng rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        Instance inst;
        for (int i = 0; i < 30; ++i) {
            inst.labels.push_back(static_cast<int>(rng.below(2)));
            inst.scores.push_back(rng.uniform());
        }
        inst.labels[0] = 1;
        inst.labels[1] = 0;
        std::vector<double> neg(inst.scores.size());
        std::transform(inst.scores.begin(), inst.scores.end(), neg.begin(), [](double v) { return -v; });
        EXPECT_NEAR(auroc(inst.labels, inst.scores) + auroc(inst.labels, neg), 1.0, 1e-12);
    }
}

TEST(Auroc, InvariantUnderIncreasingTransform) {
    Rng rng(6);
    const auto inst = random_instance(rng, 60, 9);
    std::vector<double> t(inst.scores.size());
    std::transform(inst.scores.begin(), inst.scores.end(), t.begin(), [](double v) { return std::exp(3 * v) - 2; });
    EXPECT_EQ(auroc(inst.labels, inst.scores), auroc(inst.labels, t));
}

TEST(Auprc, PerfectRankingAndAllTied) {
    std::vector<int> y{0, 1, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auprc(y, std::vector<double>{0.1, 0.9, 0.2, 0.8, 0.7}), 1.0);
    EXPECT_DOUBLE_EQ(auprc(y, std::vector<double>{0.4, 0.4, 0.4, 0.4, 0.4}), 0.6);
}

TEST(Auprc, NoPositivesThrows) {
    std::vector<int> y{0, 0};
    EXPECT_THROW(auprc(y, std::vector<double>{0.1, 0.2}), UndefinedStatisticError);
}

TEST(Auprc, Random40PointInstanceMatchesThresholdSweep) {
    Rng rng(41);
    const auto inst = random_instance(rng, 40, 12);
    EXPECT_NEAR(auprc(inst.labels, inst.scores), oracle::average_precision_sweep(inst.labels, inst.scores), 1e-12);
}

TEST(Metrics, OrderIndependent) {
    Rng rng(8);
    auto inst = random_instance(rng, 80, 10);
    const auto a = classification_metrics(inst.labels, inst.scores);
    std::vector<std::size_t> perm(inst.labels.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    Instance shuffled;
    for (auto i : perm) {
        shuffled.labels.push_back(inst.labels[i]);
        shuffled.scores.push_back(inst.scores[i]);
    }
    const auto b = classification_metrics(shuffled.labels, shuffled.scores);
    EXPECT_EQ(a.f1_macro, b.f1_macro);
    EXPECT_EQ(*a.auroc, *b.auroc);
    EXPECT_NEAR(*a.auprc, *b.auprc, 1e-15);
}

TEST(Kendall, IdentityAndReversal) {
    std::vector<double> x{1, 2, 3, 4, 5, 6};
    std::vector<double> r{6, 5, 4, 3, 2, 1};
    EXPECT_DOUBLE_EQ(kendall_tau(x, x).tau, 1.0);
    EXPECT_DOUBLE_EQ(kendall_tau(x, r).tau, -1.0);
}

TEST(Kendall, HandEnumeratedExample) {
    std::vector<double> x{1, 2, 3, 4};
    std::vector<double> y{1, 3, 2, 4};
    const auto r = kendall_tau(x, y);
    EXPECT_EQ(r.concordant_minus_discordant, 4);
    EXPECT_NEAR(r.tau, 4.0 / 6.0, 1e-15);
    // scipy.stats.kendalltau(method='asymptotic')
    EXPECT_NEAR(r.p_value, 0.17423138824802498, 1e-12);
}

TEST(Kendall, TiedExampleMatchesReferencePValue) {
    std::vector<double> x{0, 0, 1, 1, 2, 2, 2, 3, 4, 4};
    std::vector<double> y{1, 2, 1, 1, 3, 2, 2, 4, 3, 4};
    const auto r = kendall_tau(x, y);
    // scipy.stats.kendalltau (tau-b, asymptotic with tie-adjusted variance)
    EXPECT_NEAR(r.tau, 0.7107724707650861, 1e-12);
    EXPECT_NEAR(r.p_value, 0.010069329344852591, 1e-12);
}

TEST(Kendall, AllTiedThrows) {
    std::vector<double> x{2, 2, 2};
    std::vector<double> y{1, 2, 3};
    EXPECT_THROW(kendall_tau(x, y), UndefinedStatisticError);
    EXPECT_THROW(kendall_tau(y, x), UndefinedStatisticError);
}

TEST(Kendall, FastPathEqualsPairDefinitionOnHeavyTies) {
    Rng rng(11);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 2 + rng.below(120);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = static_cast<double>(rng.below(5));
            y[i] = static_cast<double>(rng.below(3)) * 0.5;
        }
        const auto ref = oracle::kendall_pairs(x, y);
        if (!std::isfinite(ref.tau_b)) continue;
        EXPECT_NEAR(kendall_tau(x, y).tau, ref.tau_b, 1e-12);
        EXPECT_NEAR(kendall_tau(x, y, TauVariant::A).tau, ref.tau_a, 1e-12);
    }
}

TEST(Kendall, InvariantUnderIncreasingTransform) {
    Rng rng(12);
    std::vector<double> x(70), y(70), tx(70);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = static_cast<double>(rng.below(8));
        y[i] = rng.uniform();
        tx[i] = std::cbrt(x[i]) * 10 + 1;
    }
    EXPECT_EQ(kendall_tau(x, y).tau, kendall_tau(tx, y).tau);
}

TEST(StudentT, CdfBasics) {
    EXPECT_EQ(student_t_cdf(0.0, 4.0), 0.5);
    for (double df : {1.0, 2.5, 4.0, 30.0}) {
        double prev = 0.0;
        for (double t = -8; t <= 8; t += 0.25) {
            const double c = student_t_cdf(t, df);
            EXPECT_GE(c, prev);
            EXPECT_NEAR(c + student_t_cdf(-t, df), 1.0, 1e-12);
            prev = c;
        }
    }
}

TEST(StudentT, MatchesReferenceCdf) {
    // scipy.stats.t.cdf
    EXPECT_NEAR(student_t_cdf(-1.5, 3), 0.11529193262241141, 1e-10);
    EXPECT_NEAR(student_t_cdf(0.7, 10), 0.7500562149135578, 1e-10);
    EXPECT_NEAR(student_t_cdf(3.2, 1), 0.9035887520207704, 1e-10);
    EXPECT_NEAR(student_t_cdf(-2.5, 30.5), 0.009008122931895898, 1e-10);
}

TEST(StudentT, TwoSidedPAgainstQuadrature) {
    const double quad = oracle::t_two_sided_p_quadrature(2.0, 4.0);
    EXPECT_NEAR(quad, 0.1161165235168155, 1e-9);
    EXPECT_NEAR(student_t_two_sided_p(2.0, 4.0), quad, 1e-10);
    for (double df : {1.0, 3.0, 7.5, 19.0})
        for (double t : {0.3, 1.1, 2.7, 5.0})
            EXPECT_NEAR(student_t_two_sided_p(t, df), oracle::t_two_sided_p_quadrature(t, df), 1e-9);
}

TEST(PairedT, ConstantShiftHasZeroVariance) {
    // Dyadic values so the shift is exact in floating point.
    std::vector<double> exact_a{1.5, 1.625, 1.75}, exact_b{1.0, 1.125, 1.25};
    EXPECT_THROW(paired_t(exact_a, exact_b), UndefinedStatisticError);
}

TEST(PairedT, ReferenceValueAndSymmetry) {
    std::vector<double> a{0.61, 0.64, 0.60, 0.66, 0.63};
    std::vector<double> b{0.55, 0.58, 0.56, 0.60, 0.57};
    const auto r = paired_t(a, b);
    // scipy.stats.ttest_rel
    EXPECT_NEAR(r.t, 14.0, 1e-9);
    EXPECT_EQ(r.df, 4.0);
    EXPECT_NEAR(r.p_two_sided, 0.0001510114022218035, 1e-12);
    const auto s = paired_t(b, a);
    EXPECT_DOUBLE_EQ(s.t, -r.t);
    EXPECT_DOUBLE_EQ(s.p_two_sided, r.p_two_sided);
}

TEST(WelchT, IdenticalGroups) {
    std::vector<double> a{1, 2, 3, 4};
    const auto r = welch_t(a, a);
    EXPECT_EQ(r.t, 0.0);
    EXPECT_EQ(r.p_two_sided, 1.0);
}

TEST(WelchT, ShiftInvariant) {
    std::vector<double> a{1.0, 2.5, 3.0, 4.5}, b{2.0, 3.5, 2.75};
    std::vector<double> a2 = a, b2 = b;
    for (auto& v : a2) v += 100;
    for (auto& v : b2) v += 100;
    EXPECT_NEAR(welch_t(a, b).t, welch_t(a2, b2).t, 1e-10);
}

TEST(WelchT, TextbookInstance) {
    std::vector<double> a{14.2, 15.1, 13.8, 16.0, 15.5};
    std::vector<double> b{12.1, 13.5, 12.9, 14.0};
    const auto r = welch_t(a, b);
    // scipy.stats.ttest_ind(equal_var=False)
    EXPECT_NEAR(r.t, 3.112027969396873, 1e-10);
    EXPECT_NEAR(r.p_two_sided, 0.017524887348895506, 1e-10);
    const double quad = oracle::t_two_sided_p_quadrature(r.t, r.df);
    EXPECT_NEAR(r.p_two_sided, quad, 1e-9);
}

TEST(WelchT, DegenerateGroupsThrow) {
    std::vector<double> a{1, 1, 1}, b{2, 2};
    EXPECT_THROW(welch_t(a, b), UndefinedStatisticError);
    std::vector<double> one{1};
    EXPECT_THROW(welch_t(a, one), UndefinedStatisticError);
}

TEST(MedianSplit, AllAboveCut) {
    std::vector<double> v{1, 2, 3}, s{2, 3, 4};
    const auto r = median_split(v, s, 2.0);
    EXPECT_FALSE(r.mean_low.has_value());
    EXPECT_DOUBLE_EQ(*r.mean_high, 2.0);
    EXPECT_FALSE(r.difference.has_value());
}

TEST(MedianSplit, BinaryCutAtHalf) {
    std::vector<double> v{0.2, 0.4, 0.6, 0.8}, s{0, 1, 0, 1};
    const auto r = median_split(v, s, 0.5);
    EXPECT_DOUBLE_EQ(*r.mean_low, 0.4);
    EXPECT_DOUBLE_EQ(*r.mean_high, 0.6);
}

TEST(MedianSplit, HandCheckedSixPoints) {
    std::vector<double> v{9.0, 8.0, 10.0, 7.0, 12.0, 11.0}, s{0, 1, 2, 2, 3, 4};
    const auto r = median_split(v, s, 2.0);
    EXPECT_DOUBLE_EQ(*r.mean_low, 8.5);
    EXPECT_DOUBLE_EQ(*r.mean_high, 10.0);
    EXPECT_EQ(r.n_low, 2u);
    EXPECT_EQ(r.n_high, 4u);
    ASSERT_TRUE(r.difference.has_value());
}

TEST(BinMeans, SingletonAndConstantBins) {
    std::vector<int> totals{3, 12, 12, 12};
    std::vector<double> values{0.4, 0.3, 0.3, 0.3};
    const auto bins = bin_means(totals, values);
    ASSERT_EQ(bins.size(), 5u);
    EXPECT_EQ(bins[0].n, 1u);
    EXPECT_FALSE(bins[0].sem.has_value());
    EXPECT_EQ(bins[1].n, 0u);
    EXPECT_FALSE(bins[1].mean.has_value());
    EXPECT_EQ(*bins[2].sem, 0.0);
}

TEST(BinMeans, HandCheckedTenPoints) {
    std::vector<int> totals{0, 4, 5, 9, 10, 14, 15, 19, 20, 27};
    std::vector<double> values{1, 3, 2, 4, 3, 4, 5, 5, 6, 8};
    const auto bins = bin_means(totals, values);
    double expected_mean[] = {2, 3, 3.5, 5, 7};
    // sd of a pair {u,v} is |u-v|/sqrt(2); SEM = |u-v|/2.
    double expected_sem[] = {1, 1, 0.5, 0, 1};
    for (int k = 0; k < 5; ++k) {
        EXPECT_EQ(bins[static_cast<std::size_t>(k)].n, 2u);
        EXPECT_DOUBLE_EQ(*bins[static_cast<std::size_t>(k)].mean, expected_mean[k]);
        EXPECT_DOUBLE_EQ(*bins[static_cast<std::size_t>(k)].sem, expected_sem[k]);
    }
}

TEST(Median, OddEvenEmpty) {
    EXPECT_EQ(*median({0, 1, 3}), 1.0);
    EXPECT_EQ(*median({0, 1}), 0.5);
    EXPECT_FALSE(median({}).has_value());
}
