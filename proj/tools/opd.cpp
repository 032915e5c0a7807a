// opd: command-line driver for the phrase detection toolkit.
//
// Every flag mirrors a key of the command's JSON config (--learning-rate is
// "learning_rate"); flags override --config, which overrides defaults. Exit
// codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "opd/augment.hpp"
#include "opd/checkpoint.hpp"
#include "opd/eval.hpp"
#include "opd/filter.hpp"
#include "opd/sampler.hpp"
#include "opd/scoring.hpp"
#include "opd/synth.hpp"
#include "opd/trainer.hpp"

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "1.0.0";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Kind { Text, Int, Real, Flag, IntList, InFile, OutFile };

struct Key {
  std::string name;
  Kind kind;
  json fallback;
  bool required = false;
  std::string raw;
  bool flag = false;
  CLI::Option* opt = nullptr;
};

std::string name_of_flag(std::string key) {
  for (auto& c : key)
    if (c == '_') c = '-';
  return key;
}

std::string flag_name(const std::string& key) { return "--" + name_of_flag(key); }

json parse_value(const Key& k, const std::string& text) {
  try {
    switch (k.kind) {
      case Kind::Int: {
        std::size_t used = 0;
        long long v = std::stoll(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case Kind::Real: {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size()) break;
        return v;
      }
      case Kind::IntList: {
        json out = json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
          std::size_t used = 0;
          long long v = std::stoll(item, &used);
          if (used != item.size()) throw std::invalid_argument(item);
          out.push_back(v);
        }
        return out;
      }
      default:
        return text;
    }
  } catch (const std::exception&) {
  }
  throw UsageError(flag_name(k.name) + ": cannot parse \"" + text + "\"");
}

void check_type(const Key& k, const json& v) {
  if (v.is_null()) return;
  bool ok = true;
  switch (k.kind) {
    case Kind::Int: ok = v.is_number_integer(); break;
    case Kind::Real: ok = v.is_number(); break;
    case Kind::Flag: ok = v.is_boolean(); break;
    case Kind::IntList:
      ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& x) { return x.is_number_integer(); });
      break;
    default: ok = v.is_string(); break;
  }
  if (!ok) throw UsageError("config key \"" + k.name + "\" has the wrong type");
}

// A subcommand whose flags double as config-file keys.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& about) : name_(name) {
    app_ = parent.add_subcommand(name, about);
    app_->add_option("--config", config_path_, "JSON object with values for any of this command's flags")
        ->check(CLI::ExistingFile);
  }

  Command& key(const std::string& name, Kind kind, json fallback, const std::string& help, bool required = false) {
    keys_.push_back(std::make_unique<Key>(Key{name, kind, std::move(fallback), required, {}, false, nullptr}));
    Key& k = *keys_.back();
    std::string text = help;
    if (required) text += " (required)";
    if (!k.fallback.is_null()) text += " [default: " + (k.fallback.is_string() ? k.fallback.get<std::string>() : k.fallback.dump()) + "]";
    if (kind == Kind::Flag) {
      k.opt = app_->add_flag(flag_name(name), k.flag, text + "; --" + name_of_flag(name) + "=false turns it off");
      return *this;
    }
    k.opt = app_->add_option(flag_name(name), k.raw, text);
    static const char* const kTypes[] = {"TEXT", "INT", "REAL", "", "INT,INT,...", "FILE", "PATH"};
    k.opt->type_name(kTypes[static_cast<int>(kind)]);
    return *this;
  }

  Command& run(std::function<int(const json&, const json&)> f) {
    handler_ = std::move(f);
    return *this;
  }

  bool parsed() const { return app_->parsed(); }
  const std::string& name() const { return name_; }

  // Defaults, then the config file, then flags given on the command line.
  json resolve() const {
    json out = json::object();
    for (const auto& k : keys_) out[k->name] = k->fallback;
    if (!config_path_.empty()) {
      json file;
      try {
        file = json::parse(opd::io::read_file(config_path_));
      } catch (const json::exception& e) {
        throw UsageError("--config " + config_path_ + ": " + e.what());
      }
      if (!file.is_object()) throw UsageError("--config must hold a JSON object");
      for (auto it = file.begin(); it != file.end(); ++it) {
        const Key* k = find(it.key());
        if (!k) throw UsageError("--config: unknown key \"" + it.key() + "\" for " + name_);
        check_type(*k, it.value());
        out[it.key()] = it.value();
      }
    }
    for (const auto& k : keys_) {
      if (k->opt->count() == 0) continue;
      out[k->name] = k->kind == Kind::Flag ? json(k->flag) : parse_value(*k, k->raw);
    }
    for (const auto& k : keys_) {
      if (k->required && out[k->name].is_null())
        throw UsageError(name_ + ": " + flag_name(k->name) + " is required (flag or config key)");
      if (k->kind == Kind::InFile && out[k->name].is_string() && !fs::is_regular_file(out[k->name].get<std::string>()))
        throw UsageError(name_ + ": input file not found: " + out[k->name].get<std::string>());
    }
    return out;
  }

  int execute() const {
    json params = resolve();
    json run = {{"tool", "opd"}, {"version", kVersion}, {"command", name_}};
    if (params.contains("seed")) {
      if (params["seed"].is_null()) {
        std::uint64_t seed = 0;
        std::string source = "default";
        if (const char* env = std::getenv("OPD_SEED")) {
          try {
            std::size_t used = 0;
            seed = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument(env);
          } catch (const std::exception&) {
            throw UsageError(std::string("OPD_SEED is not an unsigned integer: ") + env);
          }
          source = "OPD_SEED";
        }
        params["seed"] = seed;
        run["seed_source"] = source;
      } else {
        if (params["seed"].get<long long>() < 0) throw UsageError("--seed must be non-negative");
        run["seed_source"] = "config";
      }
      run["seed"] = params["seed"];
    }
    run["params"] = params;
    return handler_(params, run);
  }

 private:
  const Key* find(const std::string& name) const {
    for (const auto& k : keys_)
      if (k->name == name) return k.get();
    return nullptr;
  }

  CLI::App* app_ = nullptr;
  std::string name_;
  std::string config_path_;
  std::vector<std::unique_ptr<Key>> keys_;
  std::function<int(const json&, const json&)> handler_;
};

// ---------------------------------------------------------------------------
// Helpers

std::string str(const json& p, const char* key) { return p.at(key).is_null() ? std::string() : p.at(key).get<std::string>(); }

bool has(const json& p, const char* key) { return !p.at(key).is_null(); }

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  auto out = opd::io::open_out(path);
  out << j.dump(2) << '\n';
}

void write_sidecar(const std::string& path, const json& run) { write_json(run, path + ".run.json"); }

opd::DatasetMode mode_of(const json& p) {
  try {
    return opd::parse_mode(str(p, "mode"));
  } catch (const opd::FormatError& e) {
    throw UsageError(e.what());
  }
}

opd::Split split_of(const json& p) {
  try {
    return opd::parse_split(str(p, "split"));
  } catch (const opd::FormatError& e) {
    throw UsageError(e.what());
  }
}

std::map<std::string, std::int64_t> train_counts(const json& p) {
  if (!has(p, "train")) return {};
  return opd::count_train_occurrences(opd::read_dataset(str(p, "train"), opd::Split::Train, opd::DatasetMode::FlickrLike));
}

opd::FilterSets read_filters(const std::string& path) {
  json j;
  try {
    j = json::parse(opd::io::read_file(path));
  } catch (const json::exception& e) {
    throw opd::IngestError(path + ": " + e.what());
  }
  if (j.is_object() && j.contains("filters")) j = j["filters"];
  if (!j.is_object()) throw opd::IngestError(path + ": expected an object mapping image ids to phrase lists");
  opd::FilterSets out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto& set = out[it.key()];
    for (const auto& ph : it.value()) set.insert(opd::normalize_phrase(ph.get<std::string>()));
  }
  return out;
}

opd::AlignmentModel load_model(const std::string& path) {
  const auto ck = opd::load_checkpoint(path);
  if (!opd::is_cca_solution(ck)) return opd::model_from_checkpoint(ck);
  const auto sol = opd::cca_from_checkpoint(ck);
  opd::AlignmentModel m;
  m.head = opd::HeadKind::Cca;
  m.region_dim = sol.wx.rows();
  m.phrase_dim = sol.wy.rows();
  auto pair = opd::layers_from_cca(sol);
  m.region.layers = {pair.region};
  m.phrase.layers = {pair.phrase};
  m.region.relu_between = m.phrase.relu_between = false;
  return m;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_ingest(const json& p, const json& run) {
  if (!has(p, "features") && !has(p, "dataset") && !has(p, "proposals") && !has(p, "lexicon"))
    throw UsageError("ingest: give at least one of --features, --dataset, --proposals, --lexicon");
  json out = json::object();
  if (has(p, "features")) {
    const auto fs = opd::read_features(str(p, "features"));
    out["features"] = {{"path", str(p, "features")}, {"dimension", fs.dimension()}, {"rows", fs.size()}};
  }
  if (has(p, "dataset")) {
    const auto ds = opd::read_dataset(str(p, "dataset"), split_of(p), mode_of(p));
    std::size_t regions = 0, labels = 0, augmented = 0;
    for (const auto& img : ds.images)
      for (const auto& r : img.regions) {
        ++regions;
        for (const auto& l : r.phrases) (l.augmented ? augmented : labels) += 1;
      }
    json d = {{"path", str(p, "dataset")}, {"images", ds.images.size()}, {"regions", regions},
              {"annotations", labels}, {"augmented_labels", augmented}, {"phrases", ds.vocabulary().size()}};
    if (ds.split == opd::Split::Train) {
      const auto counts = opd::count_train_occurrences(ds);
      json buckets = {{"zero_shot", 0}, {"few_shot", 0}, {"common", 0}};
      for (const auto& [_, c] : counts) {
        auto& slot = buckets[std::string(opd::bucket_name(opd::bucket_of(c)))];
        slot = slot.get<int>() + 1;
      }
      d["phrases_by_bucket"] = buckets;
    }
    out["dataset"] = d;
  }
  if (has(p, "proposals")) {
    const auto ps = opd::read_proposals(str(p, "proposals"));
    std::size_t boxes = 0;
    for (const auto& [_, v] : ps.boxes) boxes += v.size();
    out["proposals"] = {{"path", str(p, "proposals")}, {"images", ps.boxes.size()}, {"boxes", boxes}};
  }
  if (has(p, "lexicon")) {
    const auto lex = opd::read_lexicon(str(p, "lexicon"));
    out["lexicon"] = {{"path", str(p, "lexicon")}, {"words", lex.replacements.size()},
                      {"protected", lex.protected_words.size()}};
  }
  out["run"] = run;
  write_json(out, str(p, "out"));
  return 0;
}

int cmd_fit_cca(const json& p, const json& run) {
  const auto xs = opd::read_features(str(p, "x"));
  const auto ys = opd::read_features(str(p, "y"));
  opd::Mat x, y;
  if (has(p, "dataset")) {
    const auto ds = opd::read_dataset(str(p, "dataset"), opd::Split::Train, mode_of(p));
    std::tie(x, y) = opd::cca_training_pairs({&ds, &xs, &ys, nullptr, nullptr});
  } else {
    if (xs.size() != ys.size())
      throw UsageError("fit-cca: --x and --y have different row counts; pass --dataset to pair rows by annotation");
    x = xs.gather(xs.ids());
    y = ys.gather(ys.ids());
  }
  opd::CcaOptions opt;
  opt.k = p.at("k").get<Eigen::Index>();
  if (has(p, "eps")) opt.eps = p.at("eps").get<double>();
  opt.scale_exponent = p.at("scale_exponent").get<double>();
  const auto sol = opd::fit_cca(x, y, opt);
  auto ck = opd::to_checkpoint(sol);
  ck.config["run"] = run;
  opd::save_checkpoint(ck, str(p, "out"));
  std::vector<double> corr(sol.correlations.data(), sol.correlations.data() + sol.correlations.size());
  std::cout << json{{"pairs", x.rows()}, {"k", sol.k()}, {"correlations", corr}, {"out", str(p, "out")}}.dump() << '\n';
  return 0;
}

json train_defaults() {
  json j = opd::to_json(opd::TrainConfig{});
  j.erase("seed");
  return j;
}

int cmd_train(const json& p, const json& run) {
  json cfg_json = json::object();
  const json defaults = train_defaults();
  for (auto it = defaults.begin(); it != defaults.end(); ++it) cfg_json[it.key()] = p.at(it.key());
  cfg_json["seed"] = p.at("seed");
  const auto cfg = opd::train_config_from_json(cfg_json);
  cfg.validate();

  const auto mode = mode_of(p);
  const auto ds = opd::read_dataset(str(p, "dataset"), opd::Split::Train, mode);
  const auto regions = opd::read_features(str(p, "regions"));
  const auto phrases = opd::read_features(str(p, "phrases"));
  std::optional<opd::ProposalSet> proposals;
  if (has(p, "proposals")) proposals = opd::read_proposals(str(p, "proposals"));
  std::optional<opd::Lexicon> lexicon;
  if (has(p, "lexicon")) lexicon = opd::read_lexicon(str(p, "lexicon"));
  const opd::TrainingData d{&ds, &regions, &phrases, proposals ? &*proposals : nullptr, lexicon ? &*lexicon : nullptr};

  opd::AlignmentModel model;
  if (has(p, "init")) {
    const auto ck = opd::load_checkpoint(str(p, "init"));
    model = opd::is_cca_solution(ck) ? opd::initialize_model(d, cfg, opd::cca_from_checkpoint(ck))
                                     : opd::model_from_checkpoint(ck);
  } else {
    model = opd::initialize_model(d, cfg);
  }

  opd::TrainResult res;
  try {
    res = opd::train(std::move(model), d, cfg);
  } catch (const opd::TrainingAborted& e) {
    auto ck = opd::to_checkpoint(e.last_good, cfg, "");
    ck.config["run"] = run;
    ck.config["aborted_at_step"] = e.step;
    opd::save_checkpoint(ck, str(p, "out") + ".aborted");
    throw;
  }
  auto ck = opd::to_checkpoint(res.model, cfg, res.rng_state);
  ck.config["run"] = run;
  opd::save_checkpoint(ck, str(p, "out"));
  json summary = {{"steps", res.history.size()},
                  {"final_loss", res.history.empty() ? json(nullptr) : json(res.history.back())},
                  {"skipped_queries", res.skipped_queries},
                  {"npa_rebuilds", res.npa_rebuilds},
                  {"out", str(p, "out")}};
  if (has(p, "history")) write_json({{"history", res.history}, {"summary", summary}, {"run", run}}, str(p, "history"));
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_score(const json& p, const json& run) {
  const auto model = load_model(str(p, "model"));
  const auto ds = opd::read_dataset(str(p, "dataset"), opd::Split::Test, mode_of(p));
  const auto regions = opd::read_features(str(p, "regions"));
  const auto phrases = opd::read_features(str(p, "phrases"));
  std::optional<opd::ProposalSet> proposals;
  if (has(p, "proposals")) proposals = opd::read_proposals(str(p, "proposals"));
  std::optional<opd::FilterSets> filters;
  if (has(p, "filters")) filters = read_filters(str(p, "filters"));
  const std::string vocab = str(p, "vocabulary");
  std::vector<std::string> names;
  if (vocab == "dataset") names = ds.vocabulary();
  else if (vocab == "features") names = phrases.ids();
  else throw UsageError("--vocabulary must be \"dataset\" or \"features\"");
  const auto top_k = p.at("top_k").get<long long>();
  const auto threads = p.at("threads").get<long long>();
  if (top_k < 1 || threads < 1) throw UsageError("--top-k and --threads must be positive");

  const auto res = opd::score_images(model, {&ds, &regions, &phrases, proposals ? &*proposals : nullptr}, names,
                                     {static_cast<std::size_t>(top_k), filters ? &*filters : nullptr,
                                      static_cast<unsigned>(threads)});
  opd::write_scores(res.predictions, str(p, "out"));
  write_sidecar(str(p, "out"), run);
  std::cout << json{{"predictions", res.predictions.size()}, {"missing_features", res.missing_features},
                    {"out", str(p, "out")}}.dump()
            << '\n';
  return 0;
}

opd::EvalOptions eval_options(const json& p) {
  opd::EvalOptions o;
  o.include_augmented = p.at("include_augmented").get<bool>();
  o.iou_threshold = p.at("iou").get<double>();
  if (!(o.iou_threshold > 0 && o.iou_threshold <= 1)) throw UsageError("--iou must lie in (0, 1]");
  return o;
}

int cmd_eval_det(const json& p, const json& run) {
  const auto gt = opd::read_dataset(str(p, "gt"), opd::Split::Test, opd::DatasetMode::FlickrLike);
  auto preds = opd::read_scores(str(p, "scores"));
  const auto top_k = p.at("top_k").get<long long>();
  if (top_k < 0) throw UsageError("--top-k must be non-negative");
  if (top_k > 0) preds = opd::top_k_per_phrase_image(std::move(preds), static_cast<std::size_t>(top_k));
  const auto counts = train_counts(p);
  const auto opt = eval_options(p);
  const auto rep = has(p, "filters") ? opd::filtered_detection(preds, read_filters(str(p, "filters")), gt, counts, opt)
                                     : opd::detection_map(preds, gt, counts, opt);
  json j = opd::to_json(rep);
  j["run"] = run;
  if (has(p, "report")) write_json(j, str(p, "report"));
  std::cout << opd::to_text(rep, "Detection mAP");
  return 0;
}

int cmd_eval_loc(const json& p, const json& run) {
  const auto gt = opd::read_dataset(str(p, "gt"), opd::Split::Test, opd::DatasetMode::FlickrLike);
  const auto counts = train_counts(p);
  const auto opt = eval_options(p);
  const auto rep = opd::localization_accuracy(opd::read_scores(str(p, "scores")), gt, counts, opt);
  json j = opd::to_json(rep);
  if (has(p, "proposals")) {
    const auto bound = opd::proposal_upper_bound(opd::read_proposals(str(p, "proposals")), gt, counts, opt);
    j["proposal_upper_bound"] = opd::to_json(bound);
  }
  j["run"] = run;
  if (has(p, "report")) write_json(j, str(p, "report"));
  std::cout << opd::to_text(rep, "Localization accuracy");
  return 0;
}

int cmd_augment(const json& p, const json& run) {
  const auto mode = mode_of(p);
  const auto lex = opd::read_lexicon(str(p, "lexicon"));
  if (has(p, "phrase")) {
    const auto cands = opd::expand_phrase(str(p, "phrase"), lex, mode);
    write_json({{"phrase", opd::normalize_phrase(str(p, "phrase"))}, {"candidates", cands}, {"run", run}}, str(p, "out"));
    return 0;
  }
  if (!has(p, "dataset")) throw UsageError("augment: give --dataset or --phrase");
  const auto ds = opd::read_dataset(str(p, "dataset"), split_of(p), mode);
  const auto vocab = has(p, "vocabulary")
                         ? opd::split_vocabulary(opd::read_dataset(str(p, "vocabulary"), split_of(p), mode))
                         : opd::split_vocabulary(ds);
  const auto out = opd::apply_ppa(ds, lex, vocab);
  const std::string path = str(p, "out");
  if (path.empty() || path == "-") {
    opd::write_dataset(out, std::cout);
  } else {
    opd::write_dataset(out, path);
    write_sidecar(path, run);
  }
  return 0;
}

int cmd_sample_debug(const json& p, const json& run) {
  const auto ds = opd::read_dataset(str(p, "dataset"), opd::Split::Train, mode_of(p));
  if (ds.images.empty()) throw opd::IngestError("sample-debug: dataset has no images");
  const opd::ImageRecord* img = &ds.images.front();
  if (has(p, "image")) {
    img = nullptr;
    for (const auto& i : ds.images)
      if (i.image_id == str(p, "image")) img = &i;
    if (!img) throw opd::IngestError("sample-debug: no image \"" + str(p, "image") + "\"");
  }
  opd::SamplerConfig cfg;
  cfg.budget = p.at("budget").get<int>();
  cfg.gt_subsample = p.at("gt_subsample").get<int>();
  cfg.inverse_frequency = p.at("ifs").get<bool>();
  cfg.seed = p.at("seed").get<std::uint64_t>();
  const int draws = p.at("draws").get<int>();
  if (cfg.budget < 0 || cfg.gt_subsample < 1 || draws < 0) throw UsageError("sample-debug: invalid budget, gt_subsample or draws");

  const auto lik = opd::phrase_likelihoods(ds);
  std::set<std::string> gt, aug;
  for (const auto& r : img->regions)
    for (const auto& l : r.phrases) (l.augmented ? aug : gt).insert(l.text);
  for (const auto& g : gt) aug.erase(g);
  std::vector<std::string> pool(aug.begin(), aug.end());
  std::vector<double> pl;
  for (const auto& a : pool) pl.push_back(lik.at(a));
  const auto w = cfg.inverse_frequency ? opd::ifs_weights(pl) : std::vector<double>(pool.size(), pool.empty() ? 0.0 : 1.0 / static_cast<double>(pool.size()));

  json weights = json::object(), likelihoods = json::object();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    weights[pool[i]] = w[i];
    likelihoods[pool[i]] = pl[i];
  }
  opd::Rng rng = opd::derived_rng(cfg.seed, 2);
  std::map<std::string, int> first;
  json batches = json::array();
  for (int t = 0; t < draws; ++t) {
    const auto b = opd::sample_image_batch(*img, lik, cfg, rng);
    if (!b.augmented.empty()) ++first[b.augmented.front()];
    if (t < 20) batches.push_back({{"ground_truth", b.ground_truth}, {"augmented", b.augmented}});
  }
  json freq = json::object();
  for (const auto& [ph, n] : first) freq[ph] = draws ? static_cast<double>(n) / draws : 0.0;
  write_json({{"image_id", img->image_id},
              {"ground_truth", gt},
              {"likelihoods", likelihoods},
              {"weights", weights},
              {"first_draw_frequency", freq},
              {"batches", batches},
              {"run", run}},
             str(p, "out"));
  return 0;
}

int cmd_filter(const json& p, const json& run) {
  auto in = opd::io::open_in(str(p, "sentences"));
  auto sentences = opd::read_sentences(in);
  std::vector<std::string> columns;
  {
    auto cf = opd::io::open_in(str(p, "columns"));
    std::string line;
    while (std::getline(cf, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) columns.push_back(line);
    }
  }
  const auto db = opd::make_sentence_db(std::move(sentences), opd::read_features(str(p, "similarity")), columns);
  const auto top_n = p.at("top_n").get<long long>();
  if (top_n < 0) throw UsageError("--top-n must be non-negative");
  std::vector<std::string> images = db.image_ids;
  if (has(p, "images")) {
    images.clear();
    for (const auto& img : opd::read_dataset(str(p, "images"), opd::Split::Test, opd::DatasetMode::FlickrLike).images)
      images.push_back(img.image_id);
  }
  json filters = json::object();
  for (const auto& id : images) filters[id] = opd::filter_phrases(id, db, static_cast<std::size_t>(top_n));
  write_json({{"filters", filters}, {"run", run}}, str(p, "out"));
  return 0;
}

int cmd_synth(const json& p, const json& run) {
  opd::SynthConfig c;
  c.clusters = p.at("clusters").get<int>();
  c.phrases_per_cluster = p.at("phrases_per_cluster").get<int>();
  c.train_regions = p.at("train_regions").get<int>();
  c.test_regions = p.at("test_regions").get<int>();
  c.max_regions_per_image = p.at("max_regions_per_image").get<int>();
  c.latent_dim = p.at("latent_dim").get<int>();
  c.region_dim = p.at("region_dim").get<int>();
  c.phrase_dim = p.at("phrase_dim").get<int>();
  c.jittered_proposals = p.at("jittered_proposals").get<int>();
  c.background_proposals = p.at("background_proposals").get<int>();
  c.zero_shot_fraction = p.at("zero_shot_fraction").get<double>();
  c.nuisance_rank = p.at("nuisance_rank").get<int>();
  c.nuisance_scale = p.at("nuisance_scale").get<double>();
  c.seed = p.at("seed").get<std::uint64_t>();
  const auto b = opd::make_synthetic_benchmark(c);
  const fs::path dir = str(p, "out_dir");
  fs::create_directories(dir);
  opd::write_dataset(b.train, (dir / "train.jsonl").string());
  opd::write_dataset(b.test, (dir / "test.jsonl").string());
  for (const auto& [name, ps] : {std::pair{"train_proposals.jsonl", &b.train_proposals}, {"test_proposals.jsonl", &b.test_proposals}}) {
    auto out = opd::io::open_out((dir / name).string());
    opd::write_proposals(*ps, out);
  }
  opd::write_features(b.region_features, (dir / "regions.feats").string());
  opd::write_features(b.phrase_features, (dir / "phrases.feats").string());
  write_json(run, (dir / "run.json").string());
  std::cout << json{{"out_dir", dir.string()}, {"train_images", b.train.images.size()}, {"test_images", b.test.images.size()},
                    {"phrases", b.phrase_features.size()}}.dump()
            << '\n';
  return 0;
}

void print_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phrase detection toolkit: CCA alignment, phrase augmentation, training and evaluation."};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::vector<std::unique_ptr<Command>> cmds;
  auto add = [&](const std::string& name, const std::string& about) -> Command& {
    cmds.push_back(std::make_unique<Command>(app, name, about));
    return *cmds.back();
  };

  add("ingest", "Validate input files and print a summary")
      .key("features", Kind::InFile, nullptr, "feature store (.feats)")
      .key("dataset", Kind::InFile, nullptr, "ground-truth dataset (JSON lines)")
      .key("split", Kind::Text, "train", "dataset split: train, val or test")
      .key("mode", Kind::Text, "flickr", "dataset mode: flickr, referit or genome")
      .key("proposals", Kind::InFile, nullptr, "candidate boxes (JSON lines)")
      .key("lexicon", Kind::InFile, nullptr, "replacement lexicon (TSV)")
      .key("out", Kind::OutFile, nullptr, "summary JSON (default stdout)")
      .run(cmd_ingest);

  add("fit-cca", "Fit normalized CCA between region and phrase features")
      .key("x", Kind::InFile, nullptr, "region feature store", true)
      .key("y", Kind::InFile, nullptr, "phrase feature store", true)
      .key("k", Kind::Int, nullptr, "number of canonical directions", true)
      .key("eps", Kind::Real, nullptr, "covariance ridge (default 1e-4 * trace / d per view)")
      .key("scale_exponent", Kind::Real, 4.0, "exponent p of the correlation scaling")
      .key("dataset", Kind::InFile, nullptr, "pair rows through these annotations instead of by row order")
      .key("mode", Kind::Text, "flickr", "dataset mode")
      .key("out", Kind::OutFile, nullptr, "output checkpoint", true)
      .run(cmd_fit_cca);

  {
    auto& train = add("train", "Train an alignment model")
                      .key("dataset", Kind::InFile, nullptr, "training dataset (optionally augmented)", true)
                      .key("regions", Kind::InFile, nullptr, "region feature store", true)
                      .key("phrases", Kind::InFile, nullptr, "phrase feature store", true)
                      .key("proposals", Kind::InFile, nullptr, "extra candidate boxes per image")
                      .key("lexicon", Kind::InFile, nullptr, "lexicon for negative phrase filtering")
                      .key("mode", Kind::Text, "flickr", "dataset mode")
                      .key("init", Kind::InFile, nullptr, "CCA checkpoint for the first layer, or a model to continue")
                      .key("out", Kind::OutFile, nullptr, "output checkpoint", true)
                      .key("history", Kind::OutFile, nullptr, "per-step loss history (JSON)")
                      .key("seed", Kind::Int, nullptr, "random seed (default $OPD_SEED, else 0)");
    const std::map<std::string, std::string> about = {
        {"head", "scoring head: cca, embnet, simnet, qa or deep_cca"},
        {"learning_rate", "SGD step size"},
        {"steps", "optimizer steps (0 keeps the initialization)"},
        {"momentum", "SGD momentum in [0, 1)"},
        {"max_grad_norm", "clip the global gradient norm (0 disables)"},
        {"weight_decay", "L2 on head weights and, without drift, branch weights"},
        {"lambda1", "L1 weight on the SimNet output stage"},
        {"lambda2", "drift penalty toward the CCA initialization"},
        {"cca_init", "initialize the first layers from CCA"},
        {"head_only_fraction", "leading share of steps that train only the head"},
        {"freeze_bias", "keep branch biases fixed"},
        {"npa", "negative phrase augmentation from a confusion table"},
        {"npa_period", "steps between confusion table rebuilds"},
        {"npa_per_phrase", "confusable negatives kept per phrase"},
        {"npa_sample_images", "images scored per confusion table rebuild"},
        {"random_negatives", "random negative phrases per image batch"},
        {"images_per_step", "image batches summed per step"},
        {"ifs", "inverse-frequency sampling of augmented phrases"},
        {"budget", "augmented phrases sampled per image"},
        {"gt_subsample", "ground-truth phrases kept per image"},
        {"positive_iou", "IoU at which a candidate counts as a positive"},
        {"widths", "branch layer widths"},
        {"simnet_hidden", "SimNet hidden width"},
        {"relu", "ReLU between branch layers"},
        {"scale_exponent", "exponent p of the correlation scaling"},
        {"cca_eps", "CCA covariance ridge (default 1e-4 * trace / d)"},
        {"cca_refits", "training rounds, each refitting upper layers by CCA"},
        {"bbreg", "train a box regression head"},
        {"dcca_dim", "deep CCA output size"},
        {"dcca_batch", "deep CCA minibatch size"},
        {"dcca_r", "deep CCA covariance ridge"},
        {"margin", "EmbNet triplet margin"},
        {"w_rr", "EmbNet region-region loss weight"},
        {"w_pp", "EmbNet phrase-phrase loss weight"},
    };
    const json defaults = train_defaults();
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
      const json& v = it.value();
      Kind kind = v.is_boolean() ? Kind::Flag
                  : v.is_number_integer() ? Kind::Int
                  : v.is_array() ? Kind::IntList
                  : v.is_string() ? Kind::Text
                  : Kind::Real;
      auto a = about.find(it.key());
      train.key(it.key(), kind, v, a == about.end() ? "training option" : a->second);
    }
    train.run(cmd_train);
  }

  add("score", "Score every phrase against every image's candidates")
      .key("model", Kind::InFile, nullptr, "model or CCA checkpoint", true)
      .key("dataset", Kind::InFile, nullptr, "images to score (JSON lines)", true)
      .key("regions", Kind::InFile, nullptr, "region feature store", true)
      .key("phrases", Kind::InFile, nullptr, "phrase feature store", true)
      .key("proposals", Kind::InFile, nullptr, "candidate boxes (default: annotated regions)")
      .key("filters", Kind::InFile, nullptr, "per-image phrase lists from the filter command")
      .key("mode", Kind::Text, "flickr", "dataset mode")
      .key("vocabulary", Kind::Text, "dataset", "phrases to score: dataset or features")
      .key("top_k", Kind::Int, 5, "candidates kept per phrase and image")
      .key("threads", Kind::Int, 1, "worker threads")
      .key("out", Kind::OutFile, nullptr, "score file", true)
      .run(cmd_score);

  add("eval-det", "Phrase detection mAP by train-frequency bucket")
      .key("gt", Kind::InFile, nullptr, "test ground truth", true)
      .key("scores", Kind::InFile, nullptr, "score file", true)
      .key("train", Kind::InFile, nullptr, "training split for bucket counts (default: every phrase is zero-shot)")
      .key("filters", Kind::InFile, nullptr, "per-image phrase lists; evaluates filtered detection")
      .key("top_k", Kind::Int, 0, "keep only the k best per phrase and image (0 keeps all)")
      .key("include_augmented", Kind::Flag, false, "count augmented test labels as ground truth")
      .key("iou", Kind::Real, opd::kEvalIou, "IoU threshold")
      .key("report", Kind::OutFile, nullptr, "JSON report")
      .run(cmd_eval_det);

  add("eval-loc", "Phrase localization accuracy by train-frequency bucket")
      .key("gt", Kind::InFile, nullptr, "test ground truth", true)
      .key("scores", Kind::InFile, nullptr, "score file", true)
      .key("train", Kind::InFile, nullptr, "training split for bucket counts")
      .key("proposals", Kind::InFile, nullptr, "also report the proposal upper bound")
      .key("include_augmented", Kind::Flag, false, "count augmented test labels as ground truth")
      .key("iou", Kind::Real, opd::kEvalIou, "IoU threshold")
      .key("report", Kind::OutFile, nullptr, "JSON report")
      .run(cmd_eval_loc);

  add("augment", "Add positive phrase augmentations to a dataset")
      .key("dataset", Kind::InFile, nullptr, "dataset to augment")
      .key("phrase", Kind::Text, nullptr, "print the candidates of a single phrase instead")
      .key("lexicon", Kind::InFile, nullptr, "replacement lexicon (TSV)", true)
      .key("mode", Kind::Text, "flickr", "dataset mode: flickr, referit or genome")
      .key("split", Kind::Text, "train", "dataset split")
      .key("vocabulary", Kind::InFile, nullptr, "dataset whose phrases form the split vocabulary (default: --dataset)")
      .key("out", Kind::OutFile, nullptr, "output (default stdout)")
      .run(cmd_augment);

  add("sample-debug", "Dump sampling weights and draws for one image")
      .key("dataset", Kind::InFile, nullptr, "augmented training dataset", true)
      .key("mode", Kind::Text, "flickr", "dataset mode")
      .key("image", Kind::Text, nullptr, "image id (default: first image)")
      .key("budget", Kind::Int, 30, "augmented phrases per batch")
      .key("gt_subsample", Kind::Int, 5, "ground-truth phrases per batch")
      .key("ifs", Kind::Flag, true, "inverse-frequency sampling")
      .key("draws", Kind::Int, 1000, "number of batches to draw")
      .key("seed", Kind::Int, nullptr, "random seed (default $OPD_SEED, else 0)")
      .key("out", Kind::OutFile, nullptr, "JSON output (default stdout)")
      .run(cmd_sample_debug);

  add("filter", "Per-image phrase lists from retrieved training sentences")
      .key("sentences", Kind::InFile, nullptr, "training sentences (JSON lines)", true)
      .key("similarity", Kind::InFile, nullptr, "image x sentence similarity rows (.feats keyed by image id)", true)
      .key("columns", Kind::InFile, nullptr, "sentence id of each similarity column, one per line", true)
      .key("images", Kind::InFile, nullptr, "restrict to the images of this dataset")
      .key("top_n", Kind::Int, 100, "sentences retrieved per image")
      .key("out", Kind::OutFile, nullptr, "JSON output (default stdout)")
      .run(cmd_filter);

  {
    const opd::SynthConfig d;
    add("synth", "Generate the synthetic two-view benchmark")
        .key("out_dir", Kind::OutFile, nullptr, "output directory", true)
        .key("clusters", Kind::Int, d.clusters, "coarse clusters")
        .key("phrases_per_cluster", Kind::Int, d.phrases_per_cluster, "fine-grained phrases per cluster")
        .key("train_regions", Kind::Int, d.train_regions, "annotated train regions")
        .key("test_regions", Kind::Int, d.test_regions, "annotated test regions")
        .key("max_regions_per_image", Kind::Int, d.max_regions_per_image, "regions per image upper bound")
        .key("latent_dim", Kind::Int, d.latent_dim, "shared latent dimension")
        .key("region_dim", Kind::Int, d.region_dim, "region feature dimension")
        .key("phrase_dim", Kind::Int, d.phrase_dim, "phrase feature dimension")
        .key("jittered_proposals", Kind::Int, d.jittered_proposals, "proposals around each annotated region")
        .key("background_proposals", Kind::Int, d.background_proposals, "background proposals per image")
        .key("zero_shot_fraction", Kind::Real, d.zero_shot_fraction, "share of phrases held out of train")
        .key("nuisance_rank", Kind::Int, d.nuisance_rank, "high-variance directions without phrase information")
        .key("nuisance_scale", Kind::Real, d.nuisance_scale, "scale of the nuisance directions")
        .key("seed", Kind::Int, nullptr, "random seed (default $OPD_SEED, else 0)")
        .run(cmd_synth);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), 2);
    return 2;
  }

  for (const auto& c : cmds) {
    if (!c->parsed()) continue;
    try {
      return c->execute();
    } catch (const UsageError& e) {
      print_error("usage", e.what(), 2);
      return 2;
    } catch (const opd::ConfigError& e) {
      print_error("config", e.what(), 2);
      return 2;
    } catch (const opd::IngestError& e) {
      print_error("ingest", e.what(), 1);
    } catch (const opd::FitError& e) {
      print_error("fit", e.what(), 1);
    } catch (const opd::NumericalError& e) {
      print_error("numerical", e.what(), 1);
    } catch (const opd::FormatError& e) {
      print_error("format", e.what(), 1);
    } catch (const std::exception& e) {
      print_error("runtime", e.what(), 1);
    }
    return 1;
  }
  return 2;
}
