#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "pronoun/cli.hpp"

int main(int argc, char** argv) {
    pronoun::CliOptions o;
    if (const char* env = std::getenv("PRONOUN_OUT_DIR"); env && *env) o.out_dir = env;

    CLI::App app{"Pronoun-pooling depression classifier: synthetic data, preparation, training, evaluation"};
    app.require_subcommand(1, 1);

    std::uint64_t seed = 0;
    std::size_t folds = 0, runs = 0;
    std::string config, weights;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Pipeline seed; every other seed is derived from it (default 42)");
        sub->add_option("--data-dir", o.data_dir, "Directory with messages.jsonl, phq.jsonl, ema.jsonl, vocab.txt, lexicon.json")
            ->capture_default_str();
        sub->add_option("--out", o.out_dir, "Output directory (default: $PRONOUN_OUT_DIR or ./out)")->capture_default_str();
        sub->add_option("--config", config, "JSON pipeline config (see configs/desk.json)")->check(CLI::ExistingFile);
        sub->add_option("--folds", folds, "Number of cross-validation folds (default 5)")->check(CLI::Range(2, 100));
        sub->add_option("--runs", runs, "Number of fold-runs, each validating on one fold (default 5)")
            ->check(CLI::Range(1, 100));
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus into --data-dir");
    auto* prepare = app.add_subcommand("prepare", "Window, aggregate, filter, split and chunk; writes prepared.jsonl");
    auto* train = app.add_subcommand("train", "Train one model per pooling mode and fold-run");
    auto* eval = app.add_subcommand("eval", "Score trained models and lexicon baselines on the test set; writes report.json");
    auto* correlate = app.add_subcommand("correlate", "Kendall tau-b and median splits against EMA; writes correlations.csv");
    auto* bins = app.add_subcommand("bins", "Severity-bin means and SEM; writes bins.csv");
    auto* grad = app.add_subcommand("grad-check", "Finite-difference gradient check of the tiny encoder and head");
    for (auto* s : {synth, prepare, train, eval, correlate, bins, grad}) common(s);

    train->add_option("--pooling", o.pooling, "Pooling modes: cls, pronoun-i, pronoun-five (repeat or comma-separate)")
        ->delimiter(',')
        ->check(CLI::IsMember({"cls", "pronoun-i", "pronoun-five"}))
        ->capture_default_str();
    auto* freeze = train->add_flag("--freeze", "Train the head only on a frozen encoder (default)");
    auto* finetune = train->add_flag("--finetune", "Fine-tune encoder and head");
    freeze->excludes(finetune);
    train->add_option("--encoder-weights", weights, "Tensor manifest (.json, blob beside it as .bin) to initialize the encoder")
        ->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    auto* used = app.get_subcommands().front();
    if (used->count("--seed")) o.seed = seed;
    if (used->count("--folds")) o.folds = folds;
    if (used->count("--runs")) o.runs = runs;
    if (used->count("--config")) o.config = config;
    if (used == train) {
        o.frozen = finetune->count() == 0;
        if (train->count("--encoder-weights")) o.encoder_weights = weights;
    }
    return pronoun::run_command(used->get_name(), o);
}
