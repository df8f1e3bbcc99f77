#include "cssc/app.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "cssc/archive.hpp"
#include "cssc/error.hpp"

namespace cssc {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const std::vector<AblationPreset>& ablation_presets() {
  static const std::vector<AblationPreset> presets = [] {
    auto flags = [](bool b2, bool second, bool local, bool refine, bool swap) {
      return AblationFlags{b2, second, local, refine, swap};
    };
    return std::vector<AblationPreset>{
        {"ours", "Ours", flags(false, false, false, false, false)},
        {"ours_wo_smr", "Ours w/o SMR", flags(true, true, true, true, false)},
        {"ours_wo_local", "Ours w/o Local.", flags(false, false, true, false, false)},
        {"ours_wo_refine", "Ours w/o Refine.", flags(false, false, false, true, false)},
        {"smr_c", "SMR-C", flags(true, true, false, false, false)},
        {"smr_s", "SMR-S", flags(true, true, false, false, true)},
        {"smr_c+smr_s", "SMR-C | SMR-S", flags(false, true, false, false, false)},
        {"smr_c_s", "SMR-C-S", flags(true, false, false, false, false)},
        {"smr_s_c", "SMR-S-C", flags(true, false, false, false, true)},
    };
  }();
  return presets;
}

const AblationPreset& find_preset(const std::string& slug) {
  for (const auto& p : ablation_presets())
    if (p.slug == slug) return p;
  std::string all;
  for (const auto& p : ablation_presets()) all += (all.empty() ? "" : ", ") + p.slug;
  throw ValidationError("unknown ablation preset '" + slug + "' (known: " + all + ")");
}

void apply_preset(Config& c, const AblationPreset& p) {
  auto b = [](bool v) { return v ? "true" : "false"; };
  c.set("ablation.disable_branch2", b(p.flags.disable_branch2));
  c.set("ablation.disable_second_smr", b(p.flags.disable_second_smr));
  c.set("ablation.disable_local_mining", b(p.flags.disable_local_mining));
  c.set("ablation.disable_refinement", b(p.flags.disable_refinement));
  c.set("ablation.swap_branch_order", b(p.flags.swap_branch_order));
}

fs::path default_output_dir(const fs::path& config_path) {
  const char* root = std::getenv("CSSC_OUTPUT_ROOT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / (config_path.empty() ? std::string("default") : config_path.stem().string());
}

void write_provenance(const RunContext& ctx, const std::map<std::string, fs::path>& inputs) {
  fs::create_directories(ctx.output_dir);
  const std::string text = ctx.config.to_text();
  {
    std::ofstream os(ctx.output_dir / ("effective_config_" + ctx.command + ".cfg"));
    os << "# effective configuration for '" << ctx.command << "'\n" << text;
    if (!os.flush()) throw Error("cannot write effective config in " + ctx.output_dir.string());
  }
  json j;
  j["command"] = ctx.command;
  j["config_file"] = ctx.config_path.empty() ? "" : ctx.config_path.string();
  j["effective_config_sha1"] = git_blob_sha1(text);
  json files = json::object();
  for (const auto& [role, path] : inputs) files[role] = {{"path", path.string()}, {"sha1", git_blob_sha1_file(path)}};
  j["inputs"] = files;
  std::ofstream os(ctx.output_dir / ("provenance_" + ctx.command + ".json"));
  os << j.dump(2) << '\n';
  if (!os.flush()) throw Error("cannot write provenance in " + ctx.output_dir.string());
}

namespace {

fs::path manifest_path(const RunContext& ctx) {
  const std::string& m = ctx.config.get_string("data.manifest");
  return m.empty() ? ctx.output_dir / "data" / "manifest.csv" : fs::path(m);
}

fs::path checkpoint_path(const RunContext& ctx) {
  const std::string& p = ctx.config.get_string("eval.checkpoint");
  return p.empty() ? ctx.output_dir / "train" / "last.ckpt" : fs::path(p);
}

Manifest load_required_manifest(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("manifest " + p.string() + " not found (run 'synth' first or set data.manifest)");
  return load_manifest(p);
}

std::string snapshot(const Config& c, std::size_t num_ids) {
  json j;
  j["num_train_identities"] = num_ids;
  j["effective_config"] = c.to_text();
  return j.dump();
}

// Rebuilds the model a checkpoint was trained with.
CsscModel model_from_checkpoint(const Config& c, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw ValidationError("checkpoint " + ckpt.string() + " not found (run 'train' first or set eval.checkpoint)");
  const json meta = json::parse(read_archive(ckpt).metadata);
  const std::size_t n = meta.at("config").at("num_train_identities").get<std::size_t>();
  Rng rng(c.get_u64("model.seed"));
  CsscModel model(model_config(c, n), rng);
  load_checkpoint(ckpt, model);
  model.eval();
  return model;
}

void say(std::ostream* out, const std::string& msg) {
  if (out) *out << msg << std::endl;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

std::string metrics_array_json(const std::vector<EvalReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(json::parse(metrics_json(r.metrics, r.setting)));
  return arr.dump(2) + "\n";
}

void write_eval_outputs(const fs::path& dir, const std::vector<EvalReport>& reports, const EmbeddingTable& query,
                        const EmbeddingTable& gallery) {
  fs::create_directories(dir);
  for (const auto& r : reports) {
    std::ofstream os(dir / ("metrics_" + setting_name(r.setting) + ".json"));
    os << metrics_json(r.metrics, r.setting) << '\n';
    if (!os.flush()) throw Error("cannot write metrics in " + dir.string());
    write_rank_list(dir / ("ranks_" + setting_name(r.setting) + ".tsv"), r.ranks, query, gallery);
  }
  std::ofstream os(dir / "metrics.json");
  os << metrics_array_json(reports);
  if (!os.flush()) throw Error("cannot write metrics in " + dir.string());
}

PipelineResult train_and_evaluate(const Config& c, const Manifest& manifest, const fs::path& out_dir, std::ostream* progress) {
  const ModelConfig mcfg = model_config(c, manifest.num_identities);
  const TrainConfig tcfg = train_config(c);
  const auto settings = eval_settings(c);
  Rng rng(c.get_u64("model.seed"));
  CsscModel model(mcfg, rng);

  TrainOptions opts;
  opts.out_dir = out_dir / "train";
  opts.config_snapshot = snapshot(c, manifest.num_identities);
  if (progress)
    opts.on_epoch = [progress](const EpochSummary& s) {
      *progress << "  epoch " << s.epoch << "  lr " << s.lr << "  loss " << fmt(s.mean_total) << std::endl;
    };
  PipelineResult result;
  const TrainResult tr = train(model, tcfg, manifest, opts);
  result.epochs = tr.epochs;
  result.checkpoint = tr.last_checkpoint;

  EmbeddingTable q, g;
  result.reports = evaluate(model, manifest, settings, static_cast<std::size_t>(c.get_int("eval.batch_size")),
                            static_cast<std::size_t>(c.get_int("eval.max_rank")),
                            static_cast<std::size_t>(c.get_int("eval.rank_k")), &q, &g);
  write_eval_outputs(out_dir / "eval", result.reports, q, g);
  return result;
}

int run_synth(const RunContext& ctx) {
  const SynthSpec spec = synth_spec(ctx.config);
  const fs::path dir = ctx.output_dir / "data";
  const Manifest m = generate_synthetic(spec, dir);
  write_provenance(ctx, {});
  say(ctx.out, "wrote " + std::to_string(spec.total_images()) + " images and " + std::to_string(m.samples.size()) +
                   " manifest rows to " + (dir / "manifest.csv").string());
  return 0;
}

int run_train(const RunContext& ctx) {
  const fs::path mpath = manifest_path(ctx);
  const Manifest manifest = load_required_manifest(mpath);
  const ModelConfig mcfg = model_config(ctx.config, manifest.num_identities);
  const TrainConfig tcfg = train_config(ctx.config);
  std::map<std::string, fs::path> inputs{{"manifest", mpath}};
  if (!mcfg.backbone.external_weights_path.empty()) inputs["external_weights"] = mcfg.backbone.external_weights_path;
  write_provenance(ctx, inputs);

  Rng rng(ctx.config.get_u64("model.seed"));
  CsscModel model(mcfg, rng);
  say(ctx.out, "model parameters: " + std::to_string(count_params(model)));
  TrainOptions opts;
  opts.out_dir = ctx.output_dir / "train";
  opts.config_snapshot = snapshot(ctx.config, manifest.num_identities);
  if (ctx.out)
    opts.on_epoch = [&](const EpochSummary& s) {
      *ctx.out << "epoch " << s.epoch << "  lr " << s.lr << "  loss " << fmt(s.mean_total) << "  triplet "
               << fmt(s.mean_triplet) << std::endl;
    };
  const TrainResult r = train(model, tcfg, manifest, opts);
  say(ctx.out, "checkpoint: " + r.last_checkpoint.string());
  return 0;
}

int run_eval(const RunContext& ctx) {
  const fs::path mpath = manifest_path(ctx), ckpt = checkpoint_path(ctx);
  const Manifest manifest = load_required_manifest(mpath);
  const auto settings = eval_settings(ctx.config);
  for (const auto& s : settings)
    if (s.name == Setting::cloth_changing && !manifest.has_clothing)
      throw ValidationError("setting cloth_changing needs the manifest column 'clothing', which " + mpath.string() + " lacks");
  CsscModel model = model_from_checkpoint(ctx.config, ckpt);
  write_provenance(ctx, {{"manifest", mpath}, {"checkpoint", ckpt}});
  EmbeddingTable q, g;
  const auto reports = evaluate(model, manifest, settings, static_cast<std::size_t>(ctx.config.get_int("eval.batch_size")),
                                static_cast<std::size_t>(ctx.config.get_int("eval.max_rank")),
                                static_cast<std::size_t>(ctx.config.get_int("eval.rank_k")), &q, &g);
  write_eval_outputs(ctx.output_dir / "eval", reports, q, g);
  for (const auto& r : reports)
    say(ctx.out, setting_name(r.setting) + ": rank1 " + fmt(r.metrics.rank(1)) + "  mAP " + fmt(r.metrics.map) +
                     "  queries " + std::to_string(r.metrics.num_valid_queries));
  return 0;
}

int run_extract(const RunContext& ctx) {
  const fs::path mpath = manifest_path(ctx), ckpt = checkpoint_path(ctx);
  const Manifest manifest = load_required_manifest(mpath);
  CsscModel model = model_from_checkpoint(ctx.config, ckpt);
  write_provenance(ctx, {{"manifest", mpath}, {"checkpoint", ckpt}});
  const fs::path dir = ctx.output_dir / "extract";
  fs::create_directories(dir);
  const auto batch = static_cast<std::size_t>(ctx.config.get_int("eval.batch_size"));
  for (Split s : {Split::train, Split::query, Split::gallery}) {
    const EmbeddingTable t = extract_all(model, manifest, s, batch);
    if (t.meta.empty()) continue;
    write_embeddings(dir / (split_name(s) + ".tsv"), t);
    say(ctx.out, split_name(s) + ": " + std::to_string(t.meta.size()) + " embeddings");
  }
  return 0;
}

int run_gradcheck(const RunContext& ctx) {
  const GradCheckOptions opts = gradcheck_options(ctx.config);
  write_provenance(ctx, {});
  const ModelConfig mcfg = model_config(ctx.config, 2);
  std::vector<GradCheckReport> reports;
  for (SmrMode mode : {SmrMode::content, SmrMode::salient}) {
    const SmrConfig scfg = mcfg.smr_for(mode, 0);
    const std::size_t h = mcfg.backbone.input_height / mcfg.backbone.stride();
    const std::size_t w = mcfg.backbone.input_width / mcfg.backbone.stride();
    reports.push_back(gradcheck_smr(scfg, 2, 2, h, w, opts));
  }
  reports.push_back(gradcheck_model(mcfg, {0, 1}, false, opts));
  reports.push_back(gradcheck_model(mcfg, {0, 0, 1, 1}, true, opts));
  fs::create_directories(ctx.output_dir / "gradcheck");
  std::ofstream os(ctx.output_dir / "gradcheck" / "report.txt");
  bool ok = true;
  for (const auto& r : reports) {
    os << format_report(r);
    ok = ok && r.passed();
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-24s max rel error %.3e  (%zu groups below FD resolution)  %s", r.scenario.c_str(),
                  r.max_rel_error, r.unresolved, r.passed() ? "PASS" : "FAIL");
    say(ctx.out, buf);
  }
  return ok ? 0 : 2;
}

int run_ablate(const RunContext& ctx) {
  const fs::path mpath = manifest_path(ctx);
  const Manifest manifest = load_required_manifest(mpath);
  write_provenance(ctx, {{"manifest", mpath}});
  const auto seeds = ctx.config.get_int_list("ablate.seeds");
  if (seeds.empty()) throw ValidationError("config key 'ablate.seeds' must list at least one seed");
  std::vector<const AblationPreset*> presets;
  for (const auto& slug : ctx.config.get_string_list("ablate.presets")) presets.push_back(&find_preset(slug));
  const auto settings = eval_settings(ctx.config);

  json table = json::array();
  std::ostringstream tsv;
  tsv << "preset";
  for (const auto& s : settings) tsv << '\t' << setting_name(s.name) << "_rank1\t" << setting_name(s.name) << "_map";
  tsv << '\n';
  for (const AblationPreset* p : presets) {
    std::vector<double> r1(settings.size(), 0.0), mp(settings.size(), 0.0);
    for (int seed : seeds) {
      Config c = ctx.config;
      apply_preset(c, *p);
      c.set("model.seed", std::to_string(seed));
      c.set("train.seed", std::to_string(seed));
      say(ctx.out, p->display + " (seed " + std::to_string(seed) + ")");
      const auto res = train_and_evaluate(c, manifest, ctx.output_dir / "ablate" / p->slug / ("seed" + std::to_string(seed)));
      for (std::size_t i = 0; i < settings.size(); ++i) {
        r1[i] += res.reports[i].metrics.rank(1) / static_cast<double>(seeds.size());
        mp[i] += res.reports[i].metrics.map / static_cast<double>(seeds.size());
      }
    }
    json row;
    row["preset"] = p->display;
    row["slug"] = p->slug;
    tsv << p->display;
    for (std::size_t i = 0; i < settings.size(); ++i) {
      row[setting_name(settings[i].name)] = {{"rank1", r1[i]}, {"map", mp[i]}};
      tsv << '\t' << fmt(100 * r1[i], 1) << '\t' << fmt(100 * mp[i], 1);
    }
    tsv << '\n';
    table.push_back(row);
  }
  std::ofstream(ctx.output_dir / "ablate" / "comparison.json") << table.dump(2) << '\n';
  std::ofstream(ctx.output_dir / "ablate" / "comparison.tsv") << tsv.str();
  if (ctx.out) *ctx.out << "\nmean over " << seeds.size() << " seeds (percent)\n" << tsv.str();
  return 0;
}

int run_command(const RunContext& ctx) {
  if (ctx.command == "synth") return run_synth(ctx);
  if (ctx.command == "train") return run_train(ctx);
  if (ctx.command == "eval") return run_eval(ctx);
  if (ctx.command == "extract") return run_extract(ctx);
  if (ctx.command == "gradcheck") return run_gradcheck(ctx);
  if (ctx.command == "ablate") return run_ablate(ctx);
  throw ValidationError("unknown command '" + ctx.command + "'");
}

}  // namespace cssc
