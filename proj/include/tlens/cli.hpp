#pragma once

// Command-line front end. Lives in a header so tests can drive it
// in-process; tools/tlens.cpp is a two-line main.
//
// Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "tlens/errors.hpp"
#include "tlens/langid.hpp"
#include "tlens/lexicon.hpp"
#include "tlens/model_io.hpp"
#include "tlens/pipeline.hpp"
#include "tlens/report.hpp"
#include "tlens/trace_io.hpp"

namespace tlens::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr const char* kConfigEnv = "TLENS_CONFIG";

namespace detail {

namespace fs = std::filesystem;

inline void require_file(const std::string& path, std::string_view what, std::string_view flag) {
  if (path.empty()) throw ArgumentError(std::string(what) + " path missing: pass " + std::string(flag));
  if (!fs::exists(path)) {
    throw IoError(std::string(what) + " not found: " + path + " (check " + std::string(flag) +
                  " or the config file)");
  }
}

inline Lexicon open_lexicon(const std::string& path) {
  require_file(path, "lexicon", "--lexicon");
  return path.ends_with(".tsv") ? load_lexicon_tsv(path) : load_lexicon(path);
}

inline ModelBundle open_model(const std::string& path) {
  require_file(path, "model weights", "--model");
  return load_weights(path);
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline size_t resolve_workers(int w) {
  if (w < 0) throw ArgumentError("--workers must be >= 0");
  if (w == 0) return std::max(1u, std::thread::hardware_concurrency());
  return static_cast<size_t>(w);
}

/// "lang<TAB>text" per line; blank lines and '#' comments skipped.
inline LidCorpus read_lid_corpus(const std::string& path) {
  require_file(path, "LID corpus", "--corpus");
  std::istringstream in(tlens::detail::read_file(path));
  std::map<LanguageCode, std::vector<std::string>> by_lang;
  std::vector<LanguageCode> order;
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path + ":" + std::to_string(n) + ": expected LANG<TAB>TEXT");
    auto lang = LanguageCode::parse(line.substr(0, tab));
    auto [it, fresh] = by_lang.try_emplace(lang);
    if (fresh) order.push_back(lang);
    it->second.push_back(line.substr(tab + 1));
  }
  LidCorpus out;
  for (const auto& l : order) out.emplace_back(l, std::move(by_lang[l]));
  return out;
}

inline std::set<LanguageCode> language_set(const std::string& spec) {
  auto v = parse_language_list(spec);
  return {v.begin(), v.end()};
}

}  // namespace detail

struct Options {
  int workers = 1;

  // model init / train
  std::string out;
  std::string model;
  std::string lexicon;
  std::string pairs;
  std::string sources;
  std::string targets;
  std::string pivot = "eng_Latn";
  std::string template_id = "word-translate";
  size_t holdout = 4;
  ModelConfig model_config = demo_model_config();
  std::string norm = "rms";
  TrainConfig train = demo_train_config();

  // run
  std::string layer_spec = "last:10";
  size_t max_steps = 8;
  std::optional<size_t> limit;
  std::optional<uint64_t> seed;

  // analyze
  std::string traces;
  std::string profiles;
  std::string out_dir = ".";
  std::string attribution = "precedence";
  std::string precedence;
  std::string candidates;
  std::optional<int> cutoff;
  double min_margin = LidOptions{}.min_margin;
  bool use_external_lid = false;

  // report
  std::string report;
  std::string tables = "fig2,fig3,fig4,fig5,table1";

  // lid
  std::string corpus;
  size_t top_k = kDefaultProfileSize;
};

namespace detail {

inline std::vector<LanguagePair> pairs_from(const Options& o) {
  if (!o.pairs.empty()) {
    if (!o.sources.empty() || !o.targets.empty()) throw ArgumentError("--pairs cannot be combined with --sources/--targets");
    return parse_pair_list(o.pairs);
  }
  if (o.sources.empty() || o.targets.empty()) throw ArgumentError("give --pairs, or both --sources and --targets");
  return expand_pairs(parse_language_list(o.sources), parse_language_list(o.targets));
}

inline int cmd_model_init(const Options& o, std::ostream& out) {
  ModelConfig c = o.model_config;
  c.norm_kind = parse_norm_kind(o.norm);
  c.validate();
  ModelBundle bundle = [&] {
    if (o.lexicon.empty()) return init_seeded(c);
    auto lex = open_lexicon(o.lexicon);
    auto tasks = demo_tasks(pairs_from(o), parse_language_arg(o.pivot), o.holdout);
    return init_for_tasks(c, lex, tasks, o.template_id);
  }();
  if (o.out.empty()) throw ArgumentError("model init: --out is required");
  save_weights(bundle, o.out);
  out << "wrote " << o.out << " (" << bundle.config().n_layers << " layers, d_model " << bundle.config().d_model
      << ", vocab " << bundle.tokenizer().vocab_size() << ", checksum " << hex64(bundle.checksum()) << ")\n";
  return kExitOk;
}

inline int cmd_model_train(const Options& o, std::ostream& out) {
  auto lex = open_lexicon(o.lexicon);
  auto init = open_model(o.model);
  auto tasks = demo_tasks(pairs_from(o), parse_language_arg(o.pivot), o.holdout);
  auto examples = build_translation_corpus(lex, init.tokenizer(), tasks, o.template_id);
  if (o.out.empty()) throw ArgumentError("model train: --out is required");
  out << examples.size() << " training examples\n";
  auto trained = train_model(init, examples, o.train, nullptr, [&](int epoch, double loss) {
    out << "epoch " << epoch + 1 << " loss " << format_number(loss) << "\n";
  });
  save_weights(trained, o.out);
  out << "wrote " << o.out << " (checksum " << hex64(trained.checksum()) << ")\n";
  return kExitOk;
}

inline int cmd_run(const Options& o, std::ostream& out) {
  auto lex = open_lexicon(o.lexicon);
  if (!o.model.empty() && o.seed) throw ArgumentError("run: give --model or --seed, not both");
  if (o.model.empty() && !o.seed) throw ArgumentError("run: pass --model PATH (or --seed N for a seeded untrained model)");
  ModelBundle bundle = [&] {
    if (!o.model.empty()) return open_model(o.model);
    ModelConfig c;
    c.seed = *o.seed;
    return init_seeded(c);
  }();
  if (o.out.empty()) throw ArgumentError("run: --out is required");
  RunOptions ro;
  ro.pairs = pairs_from(o);
  ro.template_id = o.template_id;
  ro.layer_spec = o.layer_spec;
  ro.max_steps = o.max_steps;
  ro.workers = resolve_workers(o.workers);
  ro.concept_limit = o.limit;
  auto res = run_traces(bundle, lex, ro);
  write_traces(o.out, res.meta, res.traces);
  out << "wrote " << res.traces.size() << " traces for " << ro.pairs.size() << " pairs to " << o.out << "\n";
  if (res.skipped_partial) out << "skipped " << res.skipped_partial << " (concept, pair) combinations without forms\n";
  return kExitOk;
}

inline AnalyzeOptions analyze_options(const Options& o) {
  AnalyzeOptions ao;
  ao.workers = resolve_workers(o.workers);
  ao.pair.attribution = parse_attribution_mode(o.attribution);
  ao.pair.cutoff = o.cutoff;
  if (!o.precedence.empty()) ao.label.precedence = parse_language_list(o.precedence);
  if (!o.candidates.empty()) ao.label.candidate_set = language_set(o.candidates);
  ao.label.use_external_lid = o.use_external_lid;
  if (!(o.min_margin >= 0.0 && o.min_margin < 1.0)) throw ArgumentError("--min-margin must be in [0, 1)");
  ao.label.lid.min_margin = o.min_margin;
  return ao;
}

inline int cmd_analyze(const Options& o, std::ostream& out) {
  const auto ao = analyze_options(o);
  require_file(o.traces, "trace file", "--traces");
  auto lex = open_lexicon(o.lexicon);
  std::optional<ProfileSet> profiles;
  if (!o.profiles.empty() && !o.use_external_lid) {
    require_file(o.profiles, "LID profiles", "--profiles");
    profiles = load_profiles(o.profiles);
  }
  auto [meta, traces] = read_traces(o.traces);
  auto rep = analyze_traces(meta, traces, lex, profiles ? &*profiles : nullptr, ao);
  const fs::path dir(o.out_dir);
  ensure_dir(dir);
  tlens::detail::write_file_atomic(dir / "report.json", serialize_report(rep));
  tlens::detail::write_file_atomic(dir / "pairs.csv", pairs_csv(rep.pairs));
  tlens::detail::write_file_atomic(dir / "layers.csv", layers_csv(rep.pairs, meta.n_layers));
  out << "analyzed " << traces.size() << " traces into " << rep.pairs.size() << " pairs";
  if (!rep.excluded.empty()) out << " (" << rep.excluded.size() << " excluded)";
  out << "; wrote report.json, pairs.csv, layers.csv to " << dir.string() << "\n";
  return kExitOk;
}

inline int cmd_report(const Options& o, std::ostream& out) {
  require_file(o.report, "report", "--report");
  const auto rep = parse_report(tlens::detail::read_file(o.report));
  const fs::path dir(o.out_dir);
  ensure_dir(dir);
  std::stringstream ss(o.tables);
  std::string name;
  std::vector<std::string> written;
  while (std::getline(ss, name, ',')) {
    if (name.empty()) continue;
    std::string body;
    if (name == "fig2") body = export_fig2(rep);
    else if (name == "fig3") body = export_fig3(rep);
    else if (name == "fig4") body = export_fig4(rep);
    else if (name == "fig5") body = export_fig5(rep);
    else if (name == "table1") body = export_table1(rep);
    else throw ArgumentError("report: unknown table '" + name + "' (fig2, fig3, fig4, fig5, table1)");
    tlens::detail::write_file_atomic(dir / (name + ".csv"), body);
    written.push_back(name + ".csv");
  }
  out << "wrote";
  for (const auto& w : written) out << " " << w;
  out << " to " << dir.string() << "\n";
  return kExitOk;
}

inline int cmd_validate(const Options& o, std::ostream& out) {
  auto rep = validate_trace_file(o.traces);
  for (const auto& f : rep.findings) {
    out << o.traces << ":" << f.line << ": " << (f.fatal ? "fatal: " : "") << f.message << "\n";
  }
  if (!rep.ok()) {
    out << rep.findings.size() << " problem(s) in " << rep.records << " records\n";
    return kExitFailure;
  }
  out << "ok: " << rep.records << " records\n";
  return kExitOk;
}

inline int cmd_lid_train(const Options& o, std::ostream& out) {
  if (o.corpus.empty() == o.lexicon.empty()) throw ArgumentError("lid train: give exactly one of --corpus or --lexicon");
  LidCorpus corpus = o.corpus.empty() ? lexicon_corpus(open_lexicon(o.lexicon)) : read_lid_corpus(o.corpus);
  auto set = train_profiles(corpus, o.candidates.empty() ? std::set<LanguageCode>{} : language_set(o.candidates), o.top_k);
  if (o.out.empty()) throw ArgumentError("lid train: --out is required");
  save_profiles(set, o.out);
  out << "wrote " << set.profiles().size() << " profiles (top " << set.top_k() << ") to " << o.out << "\n";
  return kExitOk;
}

inline int cmd_lid_eval(const Options& o, std::ostream& out) {
  if (o.corpus.empty() == o.lexicon.empty()) throw ArgumentError("lid eval: give exactly one of --corpus or --lexicon");
  require_file(o.profiles, "LID profiles", "--profiles");
  auto set = load_profiles(o.profiles);
  if (!o.candidates.empty()) set = set.with_candidates(language_set(o.candidates));
  LidCorpus corpus = o.corpus.empty() ? lexicon_corpus(open_lexicon(o.lexicon)) : read_lid_corpus(o.corpus);
  LidOptions lo;
  lo.min_margin = o.min_margin;
  auto ev = evaluate_profiles(set, corpus, lo);
  out << "lang,total,correct,abstained,accuracy\n";
  for (const auto& [lang, pl] : ev.per_language) {
    out << lang.str() << "," << pl.total << "," << pl.correct << "," << pl.abstained << ","
        << format_number(pl.total ? static_cast<double>(pl.correct) / static_cast<double>(pl.total) : 0.0) << "\n";
  }
  out << "all," << ev.total << "," << ev.correct << "," << ev.abstained << "," << format_number(ev.accuracy()) << "\n";
  out << "precision over tagged: " << format_number(ev.precision()) << "\n";
  return kExitOk;
}

inline int cmd_lexicon_convert(const Options& o, std::ostream& out) {
  auto lex = open_lexicon(o.lexicon);
  if (o.out.empty()) throw ArgumentError("lexicon convert: --out is required");
  save_lexicon(lex, o.out);
  out << "wrote " << lex.concepts().size() << " concepts in " << lex.languages().size() << " languages to " << o.out
      << "\n";
  return kExitOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Logit-lens latent-language analysis for translation tasks", "tlens"};
  app.set_config("--config", "", "TOML config file; values act as flag defaults")->envname(kConfigEnv);
  app.add_option("--workers", o.workers, "Worker threads (0 = all cores)")->capture_default_str();
  app.require_subcommand(1);

  auto add_pairs = [&](CLI::App* c) {
    c->add_option("--pairs", o.pairs, "Comma-separated SRC:TGT list");
    c->add_option("--sources", o.sources, "Comma-separated sources (grid with --targets)");
    c->add_option("--targets", o.targets, "Comma-separated targets");
    c->add_option("--template", o.template_id, "Prompt template id")->capture_default_str();
  };
  auto add_curriculum = [&](CLI::App* c) {
    add_pairs(c);
    c->add_option("--pivot", o.pivot, "Pivot language of the training curriculum")->capture_default_str();
    c->add_option("--holdout", o.holdout, "Hold out every n-th concept of each direct pair")->capture_default_str();
  };

  auto* model = app.add_subcommand("model", "Reference model utilities")->require_subcommand(1);
  auto* model_init = model->add_subcommand("init", "Write a seeded untrained model");
  model_init->add_option("--out", o.out, "Weights path")->required();
  model_init->add_option("--lexicon", o.lexicon, "Learn a BPE vocabulary from the curriculum over this lexicon");
  add_curriculum(model_init);
  model_init->add_option("--layers", o.model_config.n_layers)->capture_default_str();
  model_init->add_option("--d-model", o.model_config.d_model)->capture_default_str();
  model_init->add_option("--heads", o.model_config.n_heads)->capture_default_str();
  model_init->add_option("--vocab", o.model_config.vocab_size)->capture_default_str();
  model_init->add_option("--context", o.model_config.max_context)->capture_default_str();
  model_init->add_option("--d-ff", o.model_config.d_ff, "0 = 4 * d_model")->capture_default_str();
  model_init->add_option("--norm", o.norm, "rms or layer")->capture_default_str();
  model_init->add_option("--seed", o.model_config.seed)->capture_default_str();
  model_init->add_option("--name", o.model_config.name)->capture_default_str();

  auto* model_train = model->add_subcommand("train", "Train a model on the translation curriculum");
  model_train->add_option("--model", o.model, "Initial weights")->required();
  model_train->add_option("--lexicon", o.lexicon, "Lexicon (JSON or TSV)")->required();
  model_train->add_option("--out", o.out, "Output weights path")->required();
  add_curriculum(model_train);
  model_train->add_option("--epochs", o.train.epochs)->capture_default_str();
  model_train->add_option("--batch", o.train.batch_size)->capture_default_str();
  model_train->add_option("--lr", o.train.learning_rate)->capture_default_str();
  model_train->add_option("--shuffle-seed", o.train.shuffle_seed)->capture_default_str();

  auto* run = app.add_subcommand("run", "Generate lens traces for language pairs");
  run->add_option("--lexicon", o.lexicon, "Lexicon (JSON or TSV)")->required();
  run->add_option("--model", o.model, "Model weights");
  run->add_option("--seed", o.seed, "Use a seeded untrained model instead of --model");
  add_pairs(run);
  run->add_option("--layers", o.layer_spec, "Tracked layers: all, last:N, or a list like 2,4,8")->capture_default_str();
  run->add_option("--max-steps", o.max_steps)->capture_default_str();
  run->add_option("--limit", o.limit, "At most this many concepts per pair");
  run->add_option("--out", o.out, "Trace file (.jsonl or .jsonl.gz)")->required();

  auto* analyze = app.add_subcommand("analyze", "Compute metrics from a trace file");
  analyze->add_option("--traces", o.traces, "Trace file")->required();
  analyze->add_option("--lexicon", o.lexicon, "Lexicon (JSON or TSV)")->required();
  analyze->add_option("--profiles", o.profiles, "LID profiles for non-lexicon outputs");
  analyze->add_option("--out-dir", o.out_dir)->capture_default_str();
  analyze->add_option("--attribution", o.attribution, "precedence or fractional")->capture_default_str();
  analyze->add_option("--precedence", o.precedence, "Language precedence for attribution (default: lexicon order)");
  analyze->add_option("--candidates", o.candidates, "LID candidate set (default: lexicon languages)");
  analyze->add_option("--cutoff", o.cutoff, "Last layer counted in the language distribution (default: L-4)");
  analyze->add_option("--min-margin", o.min_margin, "LID abstention margin")->capture_default_str();
  analyze->add_flag("--use-external-lid", o.use_external_lid, "Use tags stored in the traces instead of in-repo LID");

  auto* report = app.add_subcommand("report", "Export plot-ready tables from a report");
  report->add_option("--report", o.report, "report.json from analyze")->required();
  report->add_option("--out-dir", o.out_dir)->capture_default_str();
  report->add_option("--tables", o.tables)->capture_default_str();

  auto* validate = app.add_subcommand("validate", "Check a trace file and list every problem");
  validate->add_option("traces", o.traces, "Trace file")->required();

  auto* lid = app.add_subcommand("lid", "Language identification profiles")->require_subcommand(1);
  auto* lid_train = lid->add_subcommand("train", "Build n-gram profiles");
  lid_train->add_option("--corpus", o.corpus, "LANG<TAB>TEXT lines");
  lid_train->add_option("--lexicon", o.lexicon, "Use every lexicon form as training text");
  lid_train->add_option("--candidates", o.candidates, "Candidate set stored with the profiles");
  lid_train->add_option("--top-k", o.top_k)->capture_default_str();
  lid_train->add_option("--out", o.out)->required();
  auto* lid_eval = lid->add_subcommand("eval", "Accuracy of profiles on labeled text");
  lid_eval->add_option("--profiles", o.profiles)->required();
  lid_eval->add_option("--corpus", o.corpus, "LANG<TAB>TEXT lines");
  lid_eval->add_option("--lexicon", o.lexicon, "Use every lexicon form as test text");
  lid_eval->add_option("--candidates", o.candidates);
  lid_eval->add_option("--min-margin", o.min_margin)->capture_default_str();

  auto* lexicon = app.add_subcommand("lexicon", "Lexicon utilities")->require_subcommand(1);
  auto* lex_convert = lexicon->add_subcommand("convert", "TSV or JSON lexicon to canonical JSON");
  lex_convert->add_option("--in", o.lexicon)->required();
  lex_convert->add_option("--out", o.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (model_init->parsed()) return detail::cmd_model_init(o, out);
    if (model_train->parsed()) return detail::cmd_model_train(o, out);
    if (run->parsed()) return detail::cmd_run(o, out);
    if (analyze->parsed()) return detail::cmd_analyze(o, out);
    if (report->parsed()) return detail::cmd_report(o, out);
    if (validate->parsed()) return detail::cmd_validate(o, out);
    if (lid_train->parsed()) return detail::cmd_lid_train(o, out);
    if (lid_eval->parsed()) return detail::cmd_lid_eval(o, out);
    if (lex_convert->parsed()) return detail::cmd_lexicon_convert(o, out);
  } catch (const ArgumentError& e) {
    err << "tlens: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "tlens: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "tlens: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace tlens::cli
