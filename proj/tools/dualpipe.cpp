// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "dualpipe/data/dataset_io.hpp"
#include "dualpipe/train/gradcheck_suite.hpp"
#include "dualpipe/train/run_config.hpp"

using namespace dualpipe;
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> vocab_size;
  // model
  std::optional<std::size_t> d_model, n_heads, enc_layers, dec_layers, ffn;
  // extension
  std::optional<std::size_t> rank, start_layer, las_hidden;
  std::optional<double> alpha;
  // training
  std::optional<std::uint64_t> steps, checkpoint_every;
  std::optional<std::size_t> batch, threads;
  std::optional<double> lr;
  // decoding
  std::optional<double> tau, beta;
  std::optional<std::size_t> beam, max_len;
  // synth
  std::optional<std::size_t> utts;
  // paths
  std::string data, out, base, ext, manifest, refs, hyps, split = "test", mode = "auto", axis = "rank", values,
                                                     preset, groups = "all", dump;
};

template <typename V>
void override(std::optional<V> flag, V& dst) {
  if (flag) dst = *flag;
}

RunConfig resolve(const Flags& f, bool train_is_base) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  override(f.seed, c.seed);
  override(f.vocab_size, c.vocab_size);
  override(f.d_model, c.model.d_model);
  override(f.n_heads, c.model.n_heads);
  override(f.enc_layers, c.model.n_enc_layers);
  override(f.dec_layers, c.model.n_dec_layers);
  override(f.ffn, c.model.ffn_dim);
  override(f.rank, c.extension.rank);
  override(f.start_layer, c.extension.start_layer);
  override(f.las_hidden, c.extension.las_hidden);
  override(f.alpha, c.extension.alpha);
  TrainConfig& tc = train_is_base ? c.base_train : c.train;
  override(f.steps, tc.steps);
  override(f.checkpoint_every, tc.checkpoint_every);
  override(f.batch, tc.batch_size);
  override(f.threads, tc.threads);
  override(f.lr, tc.peak_lr);
  if (f.seed) {
    c.base_train.seed = *f.seed;
    c.train.seed = *f.seed;
    c.synth.seed = *f.seed;
  }
  override(f.tau, c.policy.tau);
  override(f.beta, c.policy.beta);
  override(f.beam, c.decode.beam);
  override(f.max_len, c.decode.max_len);
  override(f.utts, c.synth.utts_per_language);
  c.validate();
  return c;
}

struct LanguageGroups {
  std::vector<std::string> existing, added;
};

LanguageGroups read_groups(const fs::path& data) {
  const auto j = nlohmann::json::parse(io::read_file(data / "languages.json"));
  return {j.at("existing").get<std::vector<std::string>>(), j.at("added").get<std::vector<std::string>>()};
}

std::vector<Utterance> filter_langs(std::vector<Utterance> utts, const std::vector<std::string>& langs) {
  std::vector<Utterance> out;
  for (auto& u : utts)
    if (std::find(langs.begin(), langs.end(), u.lang) != langs.end()) out.push_back(std::move(u));
  return out;
}

std::vector<Utterance> load_split(const Flags& f, const std::vector<std::string>* langs) {
  fs::path manifest = f.manifest.empty() ? fs::path(f.data) / (f.split + ".jsonl") : fs::path(f.manifest);
  auto utts = read_manifest(manifest);
  return langs ? filter_langs(std::move(utts), *langs) : utts;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required flag ") + flag);
}

void log_line(const LossLogRow& r, std::uint64_t total) {
  if (r.step % 50 == 0 || r.step == total)
    std::cerr << "step " << r.step << "/" << total << " lr " << r.lr << " loss " << r.loss << "\n";
}

int cmd_synth(const Flags& f) {
  require(f.out, "--out");
  const RunConfig c = resolve(f, false);
  const Corpus corpus = make_corpus(c.synth);
  const fs::path out = f.out;
  for (const char* split : {"train", "dev", "test"}) {
    std::vector<std::string> all = corpus.existing;
    all.insert(all.end(), corpus.added.begin(), corpus.added.end());
    write_manifest(out, split, corpus.gather(all, split));
  }
  nlohmann::json langs{{"existing", corpus.existing}, {"added", corpus.added}};
  io::write_atomic(out / "languages.json", langs.dump(1) + "\n");
  io::write_atomic(out / "synth.json", nlohmann::json(c.synth).dump(1) + "\n");
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_train_base(const Flags& f) {
  require(f.data, "--data");
  require(f.out, "--out");
  const RunConfig c = resolve(f, true);
  const auto groups = read_groups(f.data);
  Flags tf = f;
  tf.split = "train";
  const auto train = load_split(tf, &groups.existing);
  const BpeVocab vocab = build_vocab(train, groups.existing, c.vocab_size);
  ModelConfig mc = c.model;
  mc.feat_dim = train.empty() ? mc.feat_dim : train.front().features.cols();
  TrainResult log;
  TrainHooks hooks;
  if (!f.dump.empty()) hooks.dump_dir = fs::path(f.dump);
  hooks.progress = [&](const LossLogRow& r) { log_line(r, c.base_train.steps); };
  const BaseModel<float> model = train_base(mc, vocab, train, c.base_train, &log, hooks);
  model.save(f.out);
  io::write_atomic(fs::path(f.out) / "loss.csv", loss_log_csv(log));
  std::cout << "base digest " << model.frozen_digest() << "\n";
  return 0;
}

int cmd_extend(const Flags& f) {
  require(f.data, "--data");
  require(f.base, "--base");
  require(f.out, "--out");
  const RunConfig c = resolve(f, false);
  auto base = std::make_shared<const BaseModel<float>>(BaseModel<float>::load(f.base));
  const auto groups = read_groups(f.data);
  Flags tf = f;
  tf.split = "train";
  const auto train = load_split(tf, &groups.added);
  const BpeVocab vocab = build_vocab(train, groups.added, c.vocab_size);
  TrainResult log;
  TrainHooks hooks;
  if (!f.dump.empty()) hooks.dump_dir = fs::path(f.dump);
  hooks.progress = [&](const LossLogRow& r) { log_line(r, c.train.steps); };
  auto ckpt = [&](const DualPipelineModel<float>& m, std::uint64_t step) {
    m.save(fs::path(f.out) / ("step-" + std::to_string(step)));
  };
  const auto model = extend(base, c.extension, vocab, train, c.train, &log, ckpt, hooks);
  model.save(f.out);
  io::write_atomic(fs::path(f.out) / "loss.csv", loss_log_csv(log));
  const auto n = count_additional_params(base->config(), model.config());
  std::cout << "additional params " << n.total() << " (lora " << n.lora << ", decoder " << n.decoder
            << ", layernorm " << n.layernorm << "); base digest " << base->digest() << "\n";
  return 0;
}

std::vector<std::string> group_langs(const Flags& f) {
  if (f.groups == "all" || f.data.empty()) return {};
  const auto g = read_groups(f.data);
  if (f.groups == "existing") return g.existing;
  if (f.groups == "added") return g.added;
  throw ConfigError("--langs must be all, existing or added");
}

int cmd_decode(const Flags& f) {
  require(f.base, "--base");
  require(f.out, "--out");
  if (f.data.empty() && f.manifest.empty()) throw ConfigError("decode needs --data or --manifest");
  const RunConfig c = resolve(f, false);
  const DecodeMode mode = parse_decode_mode(f.mode);
  auto base = std::make_shared<const BaseModel<float>>(BaseModel<float>::load(f.base));
  std::optional<DualPipelineModel<float>> ext;
  if (mode != DecodeMode::Primary) {
    require(f.ext, "--ext");
    ext.emplace(DualPipelineModel<float>::load(f.ext, base));
  }
  const auto langs = group_langs(f);
  const auto utts = load_split(f, langs.empty() ? nullptr : &langs);
  const auto recs =
      decode_set(*base, ext ? &*ext : nullptr, utts, mode, c.policy, c.decode, c.train.threads);
  std::string lines;
  std::size_t stage1 = 0, to_secondary = 0;
  for (const auto& r : recs) {
    lines += to_json(r).dump() + "\n";
    stage1 += r.diag.stage == 1;
    to_secondary += r.chosen == DecoderKind::Secondary;
  }
  io::write_atomic(f.out, lines);
  std::cout << "decoded " << recs.size() << " utterances; stage-1 decisions " << stage1 << "; routed to secondary "
            << to_secondary << "\n";
  return 0;
}

std::vector<TextRecord> read_text_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<TextRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("utt_id").get<std::string>(), j.value("lang", ""),
                   j.contains("text") ? j.at("text").get<std::string>() : j.at("transcript").get<std::string>()});
  }
  return out;
}

int cmd_evaluate(const Flags& f) {
  require(f.refs, "--refs");
  require(f.hyps, "--hyps");
  const auto report = evaluate(read_text_records(f.refs), read_text_records(f.hyps));
  if (!f.out.empty()) io::write_atomic(f.out, to_json(report).dump(1) + "\n");
  std::cout << format_table(report);
  return 0;
}

std::vector<std::size_t> parse_values(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stoul(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values: '" + item + "' is not a non-negative integer");
    }
  }
  return out;
}

int cmd_sweep(const Flags& f) {
  require(f.data, "--data");
  require(f.base, "--base");
  require(f.out, "--out");
  const RunConfig c = resolve(f, false);
  const SweepAxis axis = parse_sweep_axis(f.axis);
  const auto values = parse_values(f.values);
  auto base = std::make_shared<const BaseModel<float>>(BaseModel<float>::load(f.base));
  for (std::size_t v : values) {
    ExtensionConfig e = c.extension;
    (axis == SweepAxis::Rank ? e.rank : e.start_layer) = v;
    e.validate(base->config());
  }
  std::vector<SweepRow> rows;
  if (!values.empty()) {
    const auto groups = read_groups(f.data);
    Flags tf = f;
    tf.split = "train";
    const auto train = load_split(tf, &groups.added);
    const auto test = load_split(f, &groups.added);
    const BpeVocab vocab = build_vocab(train, groups.added, c.vocab_size);
    rows = sweep(base, vocab, train, test, c.extension, c.train, axis, values, c.decode, [](const SweepRow& r) {
      std::cerr << "value " << r.value << " params " << r.params.total() << " avg CER " << r.avg_cer << "\n";
    });
  }
  const std::string csv = sweep_csv(rows, axis);
  io::write_atomic(f.out, csv);
  std::cout << csv;
  return 0;
}

int cmd_count_params(const Flags& f) {
  RunConfig c = f.preset.empty() ? resolve(f, false) : RunConfig{};
  if (!f.preset.empty()) {
    if (f.preset != "whisper-large-v2") throw ConfigError("unknown preset '" + f.preset + "'");
    c.model.d_model = 1280;
    c.model.n_heads = 20;
    c.model.n_enc_layers = 32;
    c.model.ffn_dim = 5120;
    c.extension.las_hidden = 512;
    c.extension.secondary_vocab = 2000;
    override(f.rank, c.extension.rank);
    override(f.start_layer, c.extension.start_layer);
    override(f.alpha, c.extension.alpha);
  } else if (c.extension.secondary_vocab == 0) {
    c.extension.secondary_vocab = c.vocab_size;
  }
  const ParamCount n = count_additional_params(c.model, c.extension);
  nlohmann::json j{{"lora", n.lora}, {"decoder", n.decoder}, {"layernorm", n.layernorm}, {"total", n.total()}};
  std::cout << j.dump(1) << "\n";
  return 0;
}

int cmd_gradcheck(const Flags& f) {
  GradCheckOptions opt;
  opt.max_entries_per_param = 48;
  bool ok = true;
  for (const auto& r : run_gradient_suite(f.seed.value_or(1), opt)) {
    std::cout << (r.report.pass ? "PASS " : "FAIL ") << r.name << ": max rel error " << r.report.max_rel_error
              << " (" << r.report.worst_param << "[" << r.report.worst_index << "]), " << r.report.checked
              << " entries over " << r.report.per_param.size() << " tensors\n";
    ok = ok && r.report.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-pipeline low-rank language extension for a frozen encoder-decoder recognizer"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
    s->add_option("--seed", f.seed, "root seed");
    s->add_option("--threads", f.threads, "worker threads (default: DUALPIPE_THREADS or all cores)");
  };
  auto model_flags = [&](CLI::App* s) {
    s->add_option("--vocab-size", f.vocab_size);
    s->add_option("--d-model", f.d_model);
    s->add_option("--heads", f.n_heads);
    s->add_option("--enc-layers", f.enc_layers);
    s->add_option("--dec-layers", f.dec_layers);
    s->add_option("--ffn", f.ffn);
  };
  auto ext_flags = [&](CLI::App* s) {
    s->add_option("--rank", f.rank);
    s->add_option("--alpha", f.alpha);
    s->add_option("--start-layer", f.start_layer);
    s->add_option("--las-hidden", f.las_hidden);
  };
  auto train_flags = [&](CLI::App* s) {
    s->add_option("--steps", f.steps);
    s->add_option("--batch", f.batch);
    s->add_option("--lr", f.lr);
    s->add_option("--checkpoint-every", f.checkpoint_every);
    s->add_option("--dump", f.dump, "directory for a parameter dump if training diverges");
  };
  auto decode_flags = [&](CLI::App* s) {
    s->add_option("--beam", f.beam);
    s->add_option("--max-len", f.max_len);
  };

  auto* synth = app.add_subcommand("synth", "generate synthetic languages and datasets");
  common(synth);
  synth->add_option("--out", f.out)->required();
  synth->add_option("--utts", f.utts, "utterances per language");

  auto* tb = app.add_subcommand("train-base", "train and freeze the base model on existing languages");
  common(tb);
  model_flags(tb);
  train_flags(tb);
  tb->add_option("--data", f.data)->required();
  tb->add_option("--out", f.out)->required();

  auto* ex = app.add_subcommand("extend", "train adapters and the secondary decoder on new languages");
  common(ex);
  ext_flags(ex);
  train_flags(ex);
  ex->add_option("--vocab-size", f.vocab_size);
  ex->add_option("--data", f.data)->required();
  ex->add_option("--base", f.base)->required();
  ex->add_option("--out", f.out)->required();

  auto* de = app.add_subcommand("decode", "beam-decode a manifest");
  common(de);
  decode_flags(de);
  de->add_option("--mode", f.mode, "primary | secondary | auto")->check(CLI::IsMember({"primary", "secondary", "auto"}));
  de->add_option("--tau", f.tau, "stage-1 threshold (default 0.5)");
  de->add_option("--beta", f.beta, "bias added to the secondary average log-prob (default 0)");
  de->add_option("--base", f.base)->required();
  de->add_option("--ext", f.ext);
  de->add_option("--data", f.data);
  de->add_option("--manifest", f.manifest);
  de->add_option("--split", f.split);
  de->add_option("--langs", f.groups, "all | existing | added");
  de->add_option("--out", f.out)->required();

  auto* ev = app.add_subcommand("evaluate", "CER report for hypotheses against references");
  ev->add_option("--refs", f.refs)->required()->check(CLI::ExistingFile);
  ev->add_option("--hyps", f.hyps)->required()->check(CLI::ExistingFile);
  ev->add_option("--out", f.out, "write the JSON report here");

  auto* sw = app.add_subcommand("sweep", "extend + evaluate over ranks or start layers");
  common(sw);
  ext_flags(sw);
  train_flags(sw);
  decode_flags(sw);
  sw->add_option("--vocab-size", f.vocab_size);
  sw->add_option("--axis", f.axis)->check(CLI::IsMember({"rank", "start-layer"}));
  sw->add_option("--values", f.values, "comma-separated values");
  sw->add_option("--data", f.data)->required();
  sw->add_option("--base", f.base)->required();
  sw->add_option("--split", f.split);
  sw->add_option("--out", f.out)->required();

  auto* cp = app.add_subcommand("count-params", "additional parameter breakdown");
  common(cp);
  model_flags(cp);
  ext_flags(cp);
  cp->add_option("--preset", f.preset, "whisper-large-v2");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", f.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(f);
    if (*tb) return cmd_train_base(f);
    if (*ex) return cmd_extend(f);
    if (*de) return cmd_decode(f);
    if (*ev) return cmd_evaluate(f);
    if (*sw) return cmd_sweep(f);
    if (*cp) return cmd_count_params(f);
    if (*gc) return cmd_gradcheck(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
