#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "pronoun/evalstat.hpp"
#include "pronoun/lexicon.hpp"
#include "pronoun/rng.hpp"

using namespace pronoun;

namespace {

double i_percent(std::string_view text) { return extract_features(text, Lexicon::default_lexicon())[0]; }

struct Dataset {
    FeatureMatrix x;
    std::vector<int> y;
};

// Two informative columns, one noise column, labels from a logistic model.
Dataset synthetic(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d{FeatureMatrix(static_cast<Eigen::Index>(n), 3), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        d.x(r, 0) = 5 + 2 * rng.normal();
        d.x(r, 1) = 40 + 10 * rng.normal();
        d.x(r, 2) = rng.uniform();
        const double z = 0.8 * (d.x(r, 0) - 5) - 0.05 * (d.x(r, 1) - 40);
        d.y[i] = rng.uniform() < 1 / (1 + std::exp(-z)) ? 1 : 0;
    }
    return d;
}

// Plain per-coordinate gradient of the stated objective.
std::vector<double> objective_gradient(const FeatureMatrix& x, const std::vector<int>& y, const LogisticModel& m) {
    const auto n = static_cast<double>(x.rows());
    std::vector<double> g(static_cast<std::size_t>(x.cols()) + 1, 0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double z = m.bias;
        for (Eigen::Index j = 0; j < x.cols(); ++j) z += m.weights(j) * x(i, j);
        const double r = 1 / (1 + std::exp(-z)) - y[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < x.cols(); ++j) g[static_cast<std::size_t>(j)] += r * x(i, j) / n;
        g.back() += r / n;
    }
    for (Eigen::Index j = 0; j < x.cols(); ++j) g[static_cast<std::size_t>(j)] += m.lambda * m.weights(j) / n;
    return g;
}

} // namespace

TEST(ExtractFeatures, Examples) {
    EXPECT_DOUBLE_EQ(i_percent("I like my dog"), 50.0);
    EXPECT_DOUBLE_EQ(i_percent("dog dog dog"), 0.0);
    EXPECT_DOUBLE_EQ(i_percent("I'm tired"), 50.0);
    EXPECT_DOUBLE_EQ(i_percent("I\xE2\x80\x99m tired"), 50.0);
    EXPECT_DOUBLE_EQ(i_percent("Mine, MYSELF; me!"), 100.0);
    EXPECT_EQ(lexicon_words("It's 3 o'clock,ok"), (std::vector<std::string>{"it's", "3", "o'clock", "ok"}));
}

TEST(ExtractFeatures, EmptyTextAllZeros) {
    const auto row = extract_features("  ...  ", Lexicon::default_lexicon());
    EXPECT_EQ(row, (std::vector<double>{0.0, 0.0}));
}

TEST(ExtractFeatures, WordCountAndBounds) {
    Lexicon lex({{"i", {"i"}}, {"pets", {"dog", "cat"}}});
    const auto row = extract_features("I have a dog and a cat", lex);
    ASSERT_EQ(row.size(), 3u);
    EXPECT_DOUBLE_EQ(row[0], 100.0 / 7);
    EXPECT_DOUBLE_EQ(row[1], 200.0 / 7);
    EXPECT_DOUBLE_EQ(row[2], 7.0);
    Rng rng(3);
    const std::vector<std::string> vocab{"i", "dog", "cat", "me", "x", "my"};
    for (int rep = 0; rep < 100; ++rep) {
        std::string t;
        for (std::uint64_t k = 0, n = rng.below(30); k < n; ++k) t += vocab[rng.below(vocab.size())] + " ";
        for (double v : extract_features(t, lex)) EXPECT_TRUE(std::isfinite(v));
        const auto r = extract_features(t, lex);
        EXPECT_LE(r[0], 100.0);
        EXPECT_LE(r[1], 100.0);
    }
}

TEST(LexiconFile, LoadSaveAndValidation) {
    const auto dir = std::filesystem::temp_directory_path() / "pronoun_lexicon_test";
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "a.json") << R"({"posemo": ["Happy", "glad"], "negemo": ["sad"]})";
    const auto lex = Lexicon::load(dir / "a.json");
    EXPECT_EQ(lex.column_names(), (std::vector<std::string>{"i", "posemo", "negemo", "wc"}));
    EXPECT_TRUE(lex.categories()[1].words.contains("happy"));
    lex.save(dir / "b.json");
    EXPECT_EQ(Lexicon::load(dir / "b.json").column_names(), lex.column_names());
    std::ofstream(dir / "c.json") << R"({"wc": ["x"]})";
    EXPECT_THROW(Lexicon::load(dir / "c.json"), FormatError);
    std::ofstream(dir / "d.json") << R"({"x": ["two words"]})";
    EXPECT_THROW(Lexicon::load(dir / "d.json"), FormatError);
    EXPECT_THROW(Lexicon({{"a", {}}, {"a", {}}}), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Standardizer, ConstantColumnAndMoments) {
    FeatureMatrix x(5, 2);
    x << 1, 7, 2, 7, 3, 7, 4, 7, 10, 7;
    const auto s = fit_standardizer(x);
    EXPECT_FALSE(s.constant[0]);
    EXPECT_TRUE(s.constant[1]);
    const auto z = s.apply(x);
    EXPECT_TRUE((z.col(1).array() == 0.0).all());
    EXPECT_NEAR(z.col(0).mean(), 0.0, 1e-10);
    EXPECT_NEAR(z.col(0).squaredNorm() / 5.0, 1.0, 1e-10);

    FeatureMatrix test(2, 2);
    test << 100, 7, 200, 8;
    const auto zt = s.apply(test);
    EXPECT_GT(zt.col(0).mean(), 1.0);
    EXPECT_EQ(zt(1, 1), 0.0);
    EXPECT_THROW(fit_standardizer(FeatureMatrix(0, 2)), DataQualityError);
    EXPECT_THROW(s.apply(FeatureMatrix(1, 3)), UsageError);
}

TEST(LogReg, SeparableOneDimensional) {
    FeatureMatrix x(8, 1);
    x << -4, -3, -2, -1, 1, 2, 3, 4;
    const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
    const auto m = fit_logreg(fit_standardizer(x).apply(x), y);
    EXPECT_TRUE(m.converged);
    EXPECT_TRUE(std::isfinite(m.weights(0)));
    const auto p = predict_logreg(m, fit_standardizer(x).apply(x));
    const auto rep = classification_metrics(y, p);
    EXPECT_DOUBLE_EQ(rep.accuracy, 1.0);
}

TEST(LogReg, GradientAtOptimum) {
    const auto d = synthetic(400, 8);
    const auto z = fit_standardizer(d.x).apply(d.x);
    const auto m = fit_logreg(z, d.y);
    ASSERT_TRUE(m.converged);
    for (double g : objective_gradient(z, d.y, m)) EXPECT_LE(std::abs(g), 1e-6);
    EXPECT_GT(m.weights(0), 0.0);
    EXPECT_LT(m.weights(1), 0.0);
}

TEST(LogReg, LabelIndependentFeature) {
    Rng rng(21);
    const std::size_t n = 4000;
    FeatureMatrix x(n, 1), xt(n, 1);
    std::vector<int> y(n), yt(n);
    for (std::size_t i = 0; i < n; ++i) {
        x(static_cast<Eigen::Index>(i), 0) = rng.normal();
        y[i] = rng.bernoulli(0.4);
        xt(static_cast<Eigen::Index>(i), 0) = rng.normal();
        yt[i] = rng.bernoulli(0.4);
    }
    const auto s = fit_standardizer(x);
    const auto m = fit_logreg(s.apply(x), y);
    EXPECT_LT(std::abs(m.weights(0)), 0.1);
    EXPECT_NEAR(auroc(yt, predict_logreg(m, s.apply(xt))), 0.5, 0.1);
}

TEST(LogReg, SingleClassRejected) {
    FeatureMatrix x(3, 1);
    x << 1, 2, 3;
    EXPECT_THROW(fit_logreg(x, std::vector<int>{1, 1, 1}), DataQualityError);
}

TEST(LogReg, PredictExamples) {
    LogisticModel m;
    m.weights = Eigen::VectorXd::Zero(2);
    FeatureMatrix x(1, 2);
    x << 3, -4;
    EXPECT_EQ(predict_logreg(m, x)[0], 0.5);

    m.weights = Eigen::Vector2d(0.5, -1.0);
    m.bias = 0.25;
    x << 2, 1;
    // z = 0.5*2 - 1*1 + 0.25 = 0.25
    EXPECT_NEAR(predict_logreg(m, x)[0], 0.5621765008857981, 1e-15);

    LogisticModel one;
    one.weights = Eigen::VectorXd::Constant(1, 0.7);
    FeatureMatrix grid(20, 1);
    for (int i = 0; i < 20; ++i) grid(i, 0) = i - 10;
    const auto p = predict_logreg(one, grid);
    for (std::size_t i = 1; i < p.size(); ++i) EXPECT_GT(p[i], p[i - 1]);
    EXPECT_THROW(predict_logreg(one, x), UsageError);
}

TEST(LogReg, InvariantToColumnRescaling) {
    const auto d = synthetic(300, 4);
    const auto t = synthetic(100, 5);
    auto run = [&](const FeatureMatrix& train, const FeatureMatrix& test) {
        const auto s = fit_standardizer(train);
        return predict_logreg(fit_logreg(s.apply(train), d.y), s.apply(test));
    };
    const auto base = run(d.x, t.x);
    FeatureMatrix a = d.x, b = t.x;
    a.col(1) *= 37.5;
    b.col(1) *= 37.5;
    a.col(2) *= 1e-3;
    b.col(2) *= 1e-3;
    const auto scaled = run(a, b);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(base[i], scaled[i], 1e-8);
}

TEST(LogReg, RestartsReachSameOptimum) {
    const auto d = synthetic(300, 6);
    const auto z = fit_standardizer(d.x).apply(d.x);
    const auto m0 = fit_logreg(z, d.y);
    const auto p0 = predict_logreg(m0, z);
    Rng rng(2);
    for (int rep = 0; rep < 5; ++rep) {
        LogRegOptions opt;
        opt.initial_weights = Eigen::Vector3d(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
        opt.initial_bias = rng.uniform(-3, 3);
        const auto m = fit_logreg(z, d.y, opt);
        EXPECT_TRUE(m.converged);
        EXPECT_NEAR(m.objective, m0.objective, 1e-8);
        const auto p = predict_logreg(m, z);
        for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], p0[i], 1e-6);
    }
}

TEST(LogReg, IOnlyAndAllShareCodePath) {
    Lexicon lex({{"i", {"i", "me"}}, {"pets", {"dog"}}});
    const std::vector<std::string> texts{"i i dog", "dog dog dog me", "i me cat", "cat cat", "i dog dog", "me me me"};
    const std::vector<int> y{1, 0, 1, 0, 0, 1};
    std::vector<std::vector<double>> rows;
    for (const auto& t : texts) rows.push_back(extract_features(t, lex));
    const auto i_cols = feature_columns(lex, FeatureSet::IOnly);
    const auto all_cols = feature_columns(lex, FeatureSet::All);
    EXPECT_EQ(i_cols, (std::vector<std::size_t>{0}));
    EXPECT_EQ(all_cols, (std::vector<std::size_t>{0, 1, 2}));
    const auto xi = feature_matrix(rows, i_cols);
    const auto xa = feature_matrix(rows, all_cols);
    EXPECT_TRUE((xi.col(0).array() == xa.col(0).array()).all());
    EXPECT_TRUE(fit_logreg(fit_standardizer(xi).apply(xi), y).converged);
    EXPECT_TRUE(fit_logreg(fit_standardizer(xa).apply(xa), y).converged);
}
