#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "textret/archive.hpp"
#include "textret/retrieval.hpp"
#include "textret/training.hpp"

namespace textret::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::uint64_t seed = 1234;
  std::string out = "textret_out";
  bool verbose = false;
};

struct Options {
  Globals g;
  std::map<std::string, std::string> keys;  // training config flags
  std::vector<std::pair<std::string, CLI::Option*>> key_opts;
  CLI::Option* seed_opt = nullptr;

  // gen-data
  int n = 200;
  std::string lexicon, charset;
  int height = 128, width = 192, max_words = 5;
  // train / index / eval
  std::string manifest, test_manifest, checkpoint, index;
  std::vector<std::string> images, queries, words;
  std::vector<int> scales{192};
  int topk = 10;
  std::string queries_file;
  double det_thresh = 0.5;
  // ablate
  std::vector<std::string> modes{"baseline", "+ctc", "+was", "+was+ctc"};
  std::vector<std::uint64_t> seeds;
  // plot-hist
  bool augment = false;
  int bins = 20;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

json box_json(const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_text(const fs::path& path, const std::string& s) { write_file_atomic(path, s); }

/// Resolved training configuration: defaults, then --config file, then flags, then --seed.
TrainConfig resolve_config(const Options& o) {
  TrainConfig c;
  try {
    if (!o.g.config.empty()) apply_config_values(c, read_config_file(o.g.config));
    std::map<std::string, std::string> given;
    for (const auto& [k, opt] : o.key_opts)
      if (opt->count() > 0) given[k] = o.keys.at(k);
    apply_config_values(c, given);
    if (o.seed_opt && o.seed_opt->count() > 0) c.seed = o.g.seed;
    c.validate();
  } catch (const InvalidInput& e) {
    throw UsageError(e.what());
  }
  return c;
}

void write_run_manifest(const Options& o, const std::string& command, const std::vector<std::string>& args,
                        const json& config) {
  fs::create_directories(o.g.out);
  json j;
  j["subcommand"] = command;
  j["arguments"] = args;
  j["seed"] = o.g.seed;
  j["config"] = config;
  write_json(fs::path(o.g.out) / "run.json", j);
}

GalleryManifest require_manifest(const std::string& path, bool fold_case) {
  if (path.empty()) throw UsageError("--manifest is required");
  return load_manifest(path, fold_case);
}

std::vector<fs::path> manifest_images(const GalleryManifest& m) {
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < m.samples.size(); ++i) out.push_back(m.image_path(i));
  return out;
}

Retriever load_retriever(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  return Retriever(load_checkpoint(path));
}

GalleryIndex load_matching_index(const std::string& path, const Retriever& r) {
  if (path.empty()) throw UsageError("--index is required");
  GalleryIndex idx = load_index(path);
  if (idx.model_fingerprint != r.trained().fingerprint())
    throw IoError("index " + path + " was built by a different checkpoint");
  return idx;
}

std::vector<std::string> distinct_transcripts(const GalleryManifest& m, const Charset& cs) {
  std::vector<std::string> out;
  std::vector<Word> seen;
  for (const auto& s : m.samples)
    for (const auto& t : s.instances) {
      const Word w = cs.encode(t.text);
      if (std::find(seen.begin(), seen.end(), w) == seen.end()) {
        seen.push_back(w);
        out.push_back(t.text);
      }
    }
  return out;
}

// Subcommands ---------------------------------------------------------------------

json cmd_gen_data(const Options& o, std::ostream& out) {
  const auto lex = o.lexicon.empty() ? default_lexicon() : load_lexicon(o.lexicon);
  const Charset cs = o.charset.empty() ? Charset::latin_lower_digits() : Charset::load(o.charset);
  SynthConfig sc;
  sc.height = o.height;
  sc.width = o.width;
  sc.max_words = o.max_words;
  const auto m = generate_dataset(o.n, lex, cs, sc, o.g.out, o.g.seed);
  out << "wrote " << m.samples.size() << " images to " << (fs::path(o.g.out) / "annotations.json").string() << "\n";
  return {{"n", o.n}, {"height", o.height}, {"width", o.width}, {"max_words", o.max_words}, {"lexicon", lex}};
}

json cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = resolve_config(o);
  const auto m = require_manifest(o.manifest, cfg.fold_case);
  BatchObserver progress;
  if (o.g.verbose && cfg.log_every > 0)
    progress = [&err, &cfg](const BatchRecord& r) {
      if (r.iteration % cfg.log_every == 0) err << "iteration " << r.iteration << "/" << cfg.iterations << "\n";
    };
  const auto res = train(cfg, m, o.g.out, progress);
  const auto& last = res.metrics.empty() ? MetricsRow{} : res.metrics.back();
  out << "trained " << to_string(cfg.mode) << " for " << res.updates << " updates; final L=" << last.total
      << "; checkpoint " << res.checkpoint.string() << "\n";
  return config_values(cfg);
}

json cmd_index(const Options& o, std::ostream& out) {
  const Retriever r = load_retriever(o.checkpoint);
  std::vector<fs::path> images;
  if (!o.manifest.empty()) images = manifest_images(require_manifest(o.manifest, true));
  for (const auto& p : o.images) images.emplace_back(p);
  if (images.empty()) throw UsageError("index needs --manifest or --image");
  const auto idx = index_gallery(r, images, o.scales);
  const fs::path path = fs::path(o.g.out) / "index.bin";
  save_index(path, idx);
  std::size_t proposals = 0;
  for (const auto& e : idx.entries) proposals += static_cast<std::size_t>(e.size());
  out << "indexed " << idx.entries.size() << " images, " << proposals << " proposals -> " << path.string() << "\n";
  return {{"checkpoint", o.checkpoint}, {"scales", o.scales}, {"images", idx.entries.size()}};
}

json ranking_json(const RetrievalResult& r, const GalleryIndex& idx, int topk) {
  json ranking = json::array();
  for (std::size_t i = 0; i < r.ranked.size() && static_cast<int>(i) < topk; ++i) {
    const auto& item = r.ranked[i];
    ranking.push_back({{"image", idx.entries[static_cast<std::size_t>(item.image)].image},
                       {"score", item.score},
                       {"box", item.box ? box_json(*item.box) : json(nullptr)}});
  }
  return {{"query", r.text}, {"ranking", ranking}};
}

json cmd_retrieve(const Options& o, std::ostream& out) {
  if (o.queries.empty()) throw UsageError("retrieve needs at least one --query");
  if (o.topk < 1) throw UsageError("--topk must be positive");
  const Retriever r = load_retriever(o.checkpoint);
  const GalleryIndex idx = load_matching_index(o.index, r);
  json results = json::array();
  for (const auto& q : o.queries) {
    if (!idx.charset.contains(q)) throw UsageError("query '" + q + "' is not valid over the index charset");
    results.push_back(ranking_json(rank_gallery(q, r, idx), idx, o.topk));
  }
  const json doc = results.size() == 1 ? results[0] : results;
  write_json(fs::path(o.g.out) / "retrieval.json", doc);
  out << doc.dump(2) << "\n";
  return {{"index", o.index}, {"queries", o.queries}, {"topk", o.topk}};
}

json cmd_eval_map(const Options& o, std::ostream& out) {
  const Retriever r = load_retriever(o.checkpoint);
  const GalleryIndex idx = load_matching_index(o.index, r);
  const auto m = require_manifest(o.manifest, true);
  std::vector<std::string> queries = o.queries;
  if (!o.queries_file.empty()) {
    const auto extra = load_lexicon(o.queries_file);
    queries.insert(queries.end(), extra.begin(), extra.end());
  }
  if (queries.empty()) queries = distinct_transcripts(m, idx.charset);
  const auto rep = evaluate_map(r, idx, m, queries);
  json per = json::object();
  for (std::size_t q = 0; q < rep.queries.size(); ++q) per[rep.queries[q]] = rep.ap[q];
  write_json(fs::path(o.g.out) / "map.json", {{"map", rep.map}, {"ap", per}, {"skipped", rep.skipped}});
  out << "mAP " << std::setprecision(6) << rep.map << " over " << rep.queries.size() << " queries\n";
  return {{"index", o.index}, {"manifest", o.manifest}, {"queries", queries}};
}

json cmd_annotate(const Options& o, std::ostream& out) {
  const Retriever r = load_retriever(o.checkpoint);
  json doc = json::array();
  if (!o.manifest.empty()) {
    const auto m = require_manifest(o.manifest, true);
    const auto idx = index_gallery(r, manifest_images(m), o.scales);
    const auto rep = evaluate_annotation(r, idx, m, o.det_thresh);
    for (std::size_t i = 0; i < idx.entries.size(); ++i) {
      json anns = json::array();
      for (const auto& a : rep.annotations[i]) anns.push_back({{"word", a.word}, {"box", box_json(*a.box)}, {"score", a.score}});
      doc.push_back({{"image", idx.entries[i].image}, {"annotations", anns}});
    }
    const json summary = {{"annotation_f", rep.annotated.f},   {"annotation_precision", rep.annotated.precision},
                          {"annotation_recall", rep.annotated.recall}, {"detector_f", rep.detector.f},
                          {"detector_precision", rep.detector.precision}, {"detector_recall", rep.detector.recall}};
    write_json(fs::path(o.g.out) / "annotation_summary.json", summary);
    out << "annotation F " << rep.annotated.f << " vs detector F " << rep.detector.f << "\n";
  } else {
    if (o.images.size() != 1 || o.words.empty()) throw UsageError("annotate needs --manifest, or one --image with --word");
    const auto idx = index_gallery(r, {fs::path(o.images[0])}, o.scales);
    json anns = json::array();
    for (const auto& a : annotate(idx.entries[0], o.words, r))
      anns.push_back({{"word", a.word}, {"box", box_json(*a.box)}, {"score", a.score}});
    if (anns.empty()) out << "no proposals; nothing annotated\n";
    doc.push_back({{"image", idx.entries[0].image}, {"annotations", anns}});
  }
  write_json(fs::path(o.g.out) / "annotations.json", doc);
  out << "wrote " << (fs::path(o.g.out) / "annotations.json").string() << "\n";
  return {{"checkpoint", o.checkpoint}, {"scales", o.scales}, {"det_thresh", o.det_thresh}};
}

json cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  TrainConfig base = resolve_config(o);
  const auto train_m = require_manifest(o.manifest, base.fold_case);
  if (o.test_manifest.empty()) throw UsageError("--test-manifest is required");
  const auto test_m = load_manifest(o.test_manifest, base.fold_case);
  std::vector<TrainMode> modes;
  try {
    for (const auto& m : o.modes) modes.push_back(parse_mode(m));
  } catch (const InvalidInput& e) {
    throw UsageError(e.what());
  }
  const std::vector<std::uint64_t> seeds = o.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : o.seeds;
  std::ostringstream csv;
  csv << "mode,was,ctc,pp_qq,head,separated,map_mean";
  for (auto s : seeds) csv << ",map_seed_" << s;
  csv << "\n";
  json rows = json::array();
  for (std::size_t mi = 0; mi < modes.size(); ++mi) {
    std::vector<double> maps;
    for (auto seed : seeds) {
      TrainConfig c = base;
      c.mode = modes[mi];
      c.seed = seed;
      const fs::path dir = fs::path(o.g.out) / (to_string(c.mode) + "_seed" + std::to_string(seed));
      if (o.g.verbose) err << "training " << o.modes[mi] << " seed " << seed << "\n";
      const auto res = train(c, train_m, dir);
      const Retriever r(res.trained);
      const auto idx = index_gallery(r, manifest_images(test_m), o.scales);
      const auto queries = distinct_transcripts(test_m, r.charset());
      maps.push_back(evaluate_map(r, idx, test_m, queries).map);
    }
    double mean = 0;
    for (double m : maps) mean += m / static_cast<double>(maps.size());
    TrainConfig c = base;
    c.mode = modes[mi];
    csv << o.modes[mi] << ',' << c.uses_was() << ',' << c.uses_ctc() << ',' << (c.mode != TrainMode::NoPPQQ) << ','
        << (c.mode == TrainMode::PhocHead ? "phoc" : "similarity") << ',' << (c.mode == TrainMode::Separated) << ','
        << std::setprecision(6) << mean;
    for (double m : maps) csv << ',' << m;
    csv << "\n";
    rows.push_back({{"mode", o.modes[mi]}, {"map_mean", mean}, {"maps", maps}});
    out << o.modes[mi] << " mAP " << mean << "\n";
  }
  write_text(fs::path(o.g.out) / "ablation.csv", csv.str());
  json cfg = config_values(base);
  cfg["modes"] = o.modes;
  cfg["seeds"] = seeds;
  return cfg;
}

/// Grouped bar chart: one colour per series, bins left to right.
Image bar_chart(const std::vector<std::vector<double>>& series, int height = 240, int bar = 6) {
  const std::size_t bins = series.front().size();
  const int group = static_cast<int>(series.size()) * bar + 4;
  const int margin = 12, width = margin * 2 + static_cast<int>(bins) * group;
  Image img(height, width);
  img.pixels.setOnes();
  double peak = 1e-12;
  for (const auto& s : series) peak = std::max(peak, *std::max_element(s.begin(), s.end()));
  const float colours[3][3] = {{0.20f, 0.35f, 0.75f}, {0.85f, 0.45f, 0.15f}, {0.3f, 0.6f, 0.3f}};
  const int base = height - margin, top = margin;
  for (std::size_t s = 0; s < series.size(); ++s)
    for (std::size_t b = 0; b < bins; ++b) {
      const int h = static_cast<int>(std::lround(series[s][b] / peak * (base - top)));
      const int x0 = margin + static_cast<int>(b) * group + static_cast<int>(s) * bar;
      for (int y = base - h; y < base; ++y)
        for (int x = x0; x < x0 + bar - 1; ++x)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = colours[s % 3][c];
    }
  for (int x = margin; x < width - margin; ++x)
    for (int c = 0; c < 3; ++c) img.at(base, x, c) = 0.0f;
  return img;
}

json cmd_plot_hist(const Options& o, std::ostream& out) {
  if (o.bins < 1) throw UsageError("--bins must be positive");
  const auto lex = o.lexicon.empty() ? default_lexicon() : load_lexicon(o.lexicon);
  const Charset cs = o.charset.empty() ? Charset::latin_lower_digits() : Charset::load(o.charset);
  std::vector<Word> words;
  for (const auto& w : lex) words.push_back(cs.encode(w));
  std::vector<std::vector<double>> series{similarity_histogram(words, o.bins)};
  if (o.augment) {
    TrainConfig c = resolve_config(o);
    Rng rng(o.g.seed);
    series.push_back(similarity_histogram(augment_query_set(words, c.was, cs, rng), o.bins));
  }
  std::ostringstream csv;
  csv << "bin_lo,bin_hi,original" << (o.augment ? ",augmented" : "") << "\n" << std::setprecision(9);
  for (int b = 0; b < o.bins; ++b) {
    csv << static_cast<double>(b) / o.bins << ',' << static_cast<double>(b + 1) / o.bins;
    for (const auto& s : series) csv << ',' << s[static_cast<std::size_t>(b)];
    csv << "\n";
  }
  fs::create_directories(o.g.out);
  write_text(fs::path(o.g.out) / "hist.csv", csv.str());
  save_png(bar_chart(series), fs::path(o.g.out) / "hist.png");
  out << "wrote " << (fs::path(o.g.out) / "hist.csv").string() << " and hist.png\n";
  return {{"bins", o.bins}, {"augment", o.augment}, {"lexicon", lex}};
}

// Parser ----------------------------------------------------------------------------

struct Parser {
  CLI::App app{"Desk-scale scene text retrieval: generate data, train, index, retrieve, evaluate."};
  Options o;
  std::map<std::string, CLI::App*> subs;

  Parser() {
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Print help for every subcommand");
    add_globals(&app);

    auto* gen = sub("gen-data", "Render a synthetic gallery with annotations.json, charset.txt and lexicon.txt");
    gen->add_option("--n", o.n, "Number of images")->check(CLI::PositiveNumber);
    gen->add_option("--lexicon", o.lexicon, "Lexicon file, one word per line (default: built-in 20 words)");
    gen->add_option("--charset", o.charset, "Charset file, one symbol per line (default: a-z0-9)");
    gen->add_option("--height", o.height, "Image height in pixels");
    gen->add_option("--width", o.width, "Image width in pixels");
    gen->add_option("--max-words", o.max_words, "Maximum words per image");

    auto* tr = sub("train", "Train a model (any ablation mode) on a gallery manifest");
    tr->add_option("--manifest", o.manifest, "Training annotations.json")->required();
    add_config_keys(tr);

    auto* idx = sub("index", "Detect proposals and extract features for a gallery");
    idx->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
    idx->add_option("--manifest", o.manifest, "Gallery annotations.json");
    idx->add_option("--image", o.images, "Additional gallery image (repeatable)");
    add_scales(idx);

    auto* ret = sub("retrieve", "Rank indexed images for query words; prints JSON");
    ret->add_option("--checkpoint", o.checkpoint, "Checkpoint that built the index")->required();
    ret->add_option("--index", o.index, "Index file")->required();
    ret->add_option("--query", o.queries, "Query word (repeatable)")->required();
    ret->add_option("--topk", o.topk, "Number of ranked images to report");

    auto* ev = sub("eval-map", "Mean average precision of an index against manifest transcripts");
    ev->add_option("--checkpoint", o.checkpoint, "Checkpoint that built the index")->required();
    ev->add_option("--index", o.index, "Index file")->required();
    ev->add_option("--manifest", o.manifest, "Gallery annotations.json providing relevance")->required();
    ev->add_option("--query", o.queries, "Query word (repeatable; default: every distinct transcript)");
    ev->add_option("--queries", o.queries_file, "File of query words, one per line");

    auto* an = sub("annotate", "Box weakly labelled words with their most similar proposal");
    an->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
    an->add_option("--manifest", o.manifest, "Gallery whose transcripts serve as weak labels; reports F against its boxes");
    an->add_option("--image", o.images, "Single image to annotate (with --word)");
    an->add_option("--word", o.words, "Word present in --image (repeatable)");
    an->add_option("--det-thresh", o.det_thresh, "Detection score threshold for the raw-detector comparison");
    add_scales(an);

    auto* ab = sub("ablate", "Train and evaluate several modes; writes ablation.csv");
    ab->add_option("--manifest", o.manifest, "Training annotations.json")->required();
    ab->add_option("--test-manifest", o.test_manifest, "Held-out gallery annotations.json")->required();
    ab->add_option("--modes", o.modes, "Comma-separated modes, e.g. baseline,+ctc,+was,+was+ctc")->delimiter(',');
    ab->add_option("--seeds", o.seeds, "Comma-separated training seeds (default: --seed)")->delimiter(',');
    add_scales(ab);
    add_config_keys(ab);

    auto* ph = sub("plot-hist", "Histogram of pairwise word similarity; writes hist.csv and hist.png");
    ph->add_option("--lexicon", o.lexicon, "Lexicon file (default: built-in 20 words)");
    ph->add_option("--charset", o.charset, "Charset file (default: a-z0-9)");
    ph->add_flag("--augment", o.augment, "Also histogram the lexicon plus one pseudoword per word");
    ph->add_option("--bins", o.bins, "Number of bins over [0, 1]");
    o.key_opts.emplace_back("was_ratios", ph->add_option("--was_ratios", o.keys["was_ratios"],
                                                         "insert,delete,replace,keep weights for --augment"));
  }

  CLI::App* sub(const std::string& name, const std::string& desc) {
    auto* s = app.add_subcommand(name, desc);
    s->fallthrough();
    s->footer("Global options (--config, --seed, --out, --verbose) are listed by textret --help.");
    subs[name] = s;
    return s;
  }

  void add_globals(CLI::App* a) {
    a->add_option("--config", o.g.config, "Key = value config file (training keys)");
    o.seed_opt = a->add_option("--seed", o.g.seed, "Random seed");
    a->add_option("--out", o.g.out, "Output directory");
    a->add_flag("--verbose", o.g.verbose, "Progress messages on stderr");
  }

  void add_scales(CLI::App* s) {
    s->add_option("--scales", o.scales, "Comma-separated long-side lengths for multi-scale indexing")->delimiter(',');
  }

  void add_config_keys(CLI::App* s) {
    for (const auto& [key, doc] : config_docs()) {
      if (key == "seed") continue;  // the global --seed
      const std::string flags = key == "fold_case" ? "--fold_case,--fold-case" : "--" + key;
      o.key_opts.emplace_back(key, s->add_option(flags, o.keys[key], doc));
    }
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  auto p = std::make_unique<Parser>();
  std::vector<std::string> argv{"textret"};
  argv.insert(argv.end(), args.begin(), args.end());
  std::vector<const char*> cargs;
  for (const auto& a : argv) cargs.push_back(a.c_str());
  try {
    p->app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp&) {
    const CLI::App* scope = &p->app;
    for (const auto& [name, s] : p->subs)
      if (s->parsed()) scope = s;
    out << scope->help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << p->app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    // Help of the innermost subcommand that was named.
    const CLI::App* scope = &p->app;
    for (const auto& [name, s] : p->subs)
      if (s->parsed()) scope = s;
    err << scope->help();
    return kUsage;
  }
  CLI::App* chosen = p->app.get_subcommands().front();
  const std::string name = chosen->get_name();
  try {
    json cfg;
    Options& o = p->o;
    if (name == "gen-data") cfg = cmd_gen_data(o, out);
    else if (name == "train") cfg = cmd_train(o, out, err);
    else if (name == "index") cfg = cmd_index(o, out);
    else if (name == "retrieve") cfg = cmd_retrieve(o, out);
    else if (name == "eval-map") cfg = cmd_eval_map(o, out);
    else if (name == "annotate") cfg = cmd_annotate(o, out);
    else if (name == "ablate") cfg = cmd_ablate(o, out, err);
    else if (name == "plot-hist") cfg = cmd_plot_hist(o, out);
    write_run_manifest(o, name, args, cfg);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << chosen->help();
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

std::map<std::string, std::vector<std::pair<std::string, std::string>>> flag_docs() {
  Parser p;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> out;
  auto collect = [](const CLI::App* a) {
    std::vector<std::pair<std::string, std::string>> v;
    for (const auto* opt : a->get_options()) v.emplace_back(opt->get_name(), opt->get_description());
    return v;
  };
  out[""] = collect(&p.app);
  for (const auto& [name, s] : p.subs) out[name] = collect(s);
  return out;
}

}  // namespace textret::cli
