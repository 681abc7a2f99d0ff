// vprkit: label alignment, synthetic worlds, training, extraction,
// evaluation, PCA and gradient self-checks behind one binary.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vpr/gradcheck.hpp"
#include "vpr/pca.hpp"
#include "vpr/retrieval.hpp"
#include "vpr/synthbench.hpp"
#include "vpr/training.hpp"

namespace fs = std::filesystem;
using namespace vpr;

namespace {

enum Exit { kOk = 0, kFail = 1, kParse = 2, kConstraint = 3, kNumeric = 4, kIo = 5 };

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::Parse:
    case ErrorCode::BadMagic:
    case ErrorCode::BadVersion:
    case ErrorCode::Truncated: return kParse;
    case ErrorCode::InvalidArgument:
    case ErrorCode::Constraint:
    case ErrorCode::StageMismatch: return kConstraint;
    case ErrorCode::NonFinite:
    case ErrorCode::RankDeficient: return kNumeric;
    case ErrorCode::Io: return kIo;
  }
  return kFail;
}

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string log_level = "info";
};

std::ofstream open_text(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_text_in(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return in;
}

fs::path feature_path(const fs::path& dir, const std::string& image_id) { return dir / (image_id + ".spfm"); }

// ------------------------------------------------------------------- align

struct AlignOpts {
  std::string records, out, features_dir;
  sla::GridConfig grid;
};

int cmd_align(const AlignOpts& o, const Globals& g) {
  const auto records = sla::read_records(o.records);
  std::map<std::string, std::int64_t> native;
  for (const auto& r : records) {
    if (r.dataset == sla::Dataset::G) {
      if (!r.place_id) throw Error(ErrorCode::Constraint, "G record " + r.image_id + " has no place_id");
      native[r.image_id] = *r.place_id;
    }
  }
  std::unique_ptr<sla::Matcher> matcher;
  if (!o.features_dir.empty()) {
    const fs::path dir = o.features_dir;
    matcher = std::make_unique<sla::PatchCorrelationMatcher>(
        [dir](const std::string& id) { return io::read_feature(feature_path(dir, id)); });
  }
  const auto labels = sla::build_unified_labels(records, native, o.grid, matcher.get(), g.threads);
  auto out = open_text(o.out);
  sla::write_labels_jsonl(out, labels);
  out.flush();
  if (!out) throw Error(ErrorCode::Io, "failed writing " + o.out);

  const auto classes = sla::class_counts(labels);
  const auto images = sla::image_counts(labels);
  std::cout << "dataset  classes   images\n";
  for (const auto& [ds, n] : classes) {
    std::cout << "  " << sla::to_char(ds) << "    " << std::setw(8) << n << " " << std::setw(8) << images.at(ds) << '\n';
  }
  std::cout << "labelled " << labels.size() << " of " << records.size() << " records\n";
  return kOk;
}

// ------------------------------------------------------------------- synth

int cmd_synth(const synth::WorldSpec& spec, const std::string& out, const Globals& g) {
  synth::WorldSpec s = spec;
  s.seed = g.seed;
  const auto world = synth::generate(s, g.threads);
  synth::write_world(world, out);
  std::cout << "wrote " << world.maps.size() << " feature files for " << s.n_places << " places to " << out << '\n';
  return kOk;
}

// ------------------------------------------------------------------- train

struct TrainOpts {
  std::string labels, features_dir, head = "g2m", stage = "1", out, init, log;
  double lr = 6e-5;
  std::size_t batch = 64, places_per_batch = 16;
  int epochs = 10, epochs2 = 0;
  std::size_t warmup = 0;
  train::ModelSpec model;
};

train::TrainSet load_train_set(const std::string& labels_path, const fs::path& dir, int threads) {
  auto in = open_text_in(labels_path);
  const auto labels = sla::read_labels_jsonl(in);
  if (labels.empty()) throw Error(ErrorCode::Constraint, "labels file " + labels_path + " is empty");
  const auto classes = sla::global_class_ids(labels);
  train::TrainSet set;
  set.maps.resize(labels.size());
  set.classes = classes;
  parallel_for(labels.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) set.maps[i] = io::read_feature(feature_path(dir, labels[i].image_id));
  });
  return set;
}

int finish_training(const train::TrainResult& r, const std::string& path) {
  io::write_checkpoint(path, r.checkpoint());
  std::cout << io::to_string(r.stage) << ": " << r.steps << " steps, " << r.trainable_params
            << " trainable parameters, checkpoint " << path << '\n';
  if (r.aborted) {
    spdlog::error("training aborted ({}); wrote the last good parameters", r.abort_reason);
    return kNumeric;
  }
  return kOk;
}

int cmd_train(TrainOpts o, const Globals& g) {
  if (o.batch % o.places_per_batch != 0) {
    throw Error(ErrorCode::Constraint, "batch size must be a multiple of --places-per-batch");
  }
  train::BatchSpec spec{o.places_per_batch, o.batch / o.places_per_batch, g.seed};
  train::TrainConfig cfg;
  cfg.lr = o.lr;
  cfg.epochs_stage1 = o.epochs;
  if (o.epochs2 > 0) cfg.epochs_stage2 = o.epochs2;
  cfg.warmup_steps = o.warmup;
  cfg.threads = g.threads;
  cfg.validate();

  const bool ft2 = o.head == "nvl-ft2";
  if (!ft2 && o.stage != "1") throw Error(ErrorCode::Constraint, "--stage 2/both applies only to --head nvl-ft2");
  const auto data = load_train_set(o.labels, o.features_dir, g.threads);
  const std::string log_path = o.log.empty() ? o.out + ".log.jsonl" : o.log;
  auto log = open_text(log_path);

  io::Checkpoint stage1;
  if (o.stage == "1" || o.stage == "both") {
    train::ModelSpec ms = o.model;
    ms.head = ft2 ? train::Head::NetVlad : train::parse_head(o.head);
    const auto model = train::Model::init(ms, data.maps, g.seed);
    const auto r = train::train_stage1(data, model, cfg, spec, &log);
    const std::string path = o.stage == "both" ? o.out + ".stage1" : o.out;
    if (int rc = finish_training(r, path); rc != kOk) return rc;
    if (o.stage == "1") return kOk;
    stage1 = r.checkpoint();
  } else {
    if (o.init.empty()) throw Error(ErrorCode::Constraint, "--stage 2 needs --init <stage-1 checkpoint>");
    stage1 = io::read_checkpoint(o.init);
  }
  const auto r2 = train::train_stage2_ft2(stage1, data, o.model.proj_dim, cfg, spec, &log);
  return finish_training(r2, o.out);
}

// ----------------------------------------------------------------- extract

std::map<std::string, io::RowMeta> load_meta(const std::string& meta_path, const std::string& records_path) {
  std::map<std::string, io::RowMeta> out;
  if (!meta_path.empty()) {
    auto in = open_text_in(meta_path);
    for (auto& m : io::read_row_meta(in)) out[m.image_id] = m;
  } else if (!records_path.empty()) {
    for (const auto& r : sla::read_records(records_path)) {
      io::RowMeta m;
      m.image_id = r.image_id;
      m.east = r.east;
      m.north = r.north;
      out[r.image_id] = m;
    }
  }
  return out;
}

int cmd_extract(const std::string& ckpt_path, const std::string& dir, const std::string& out,
                const std::string& meta_path, const std::string& records_path, const Globals& g) {
  const auto model = train::Model::from_checkpoint(io::read_checkpoint(ckpt_path));
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".spfm") ids.push_back(e.path().stem().string());
  }
  if (ids.empty()) throw Error(ErrorCode::Io, "no .spfm files in " + dir);
  std::sort(ids.begin(), ids.end());
  const auto known = load_meta(meta_path, records_path);
  std::vector<FeatureMap> maps(ids.size());
  parallel_for(ids.size(), g.threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) maps[i] = io::read_feature(feature_path(dir, ids[i]));
  });
  std::vector<io::RowMeta> meta;
  for (const auto& id : ids) {
    auto it = known.find(id);
    if (it != known.end()) {
      meta.push_back(it->second);
    } else {
      io::RowMeta m;
      m.image_id = id;
      meta.push_back(m);
    }
  }
  const auto db = retrieval::DescriptorDb::build(train::describe_all(model, maps, g.threads), std::move(meta));
  io::write_spdb(out, db.to_table());
  std::cout << "wrote " << db.size() << " descriptors of dimension " << db.dim() << " to " << out << '\n';
  return kOk;
}

// ---------------------------------------------------------------- evaluate

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorCode::Parse, "--ks expects positive integers, got '" + item + "'");
    }
  }
  if (ks.empty()) throw Error(ErrorCode::Parse, "--ks is empty");
  return ks;
}

int cmd_evaluate(const std::string& db_path, const std::string& q_path, const std::string& regime,
                 std::optional<double> threshold, const std::string& ks_text, const std::string& json_out,
                 const Globals& g) {
  retrieval::GroundTruth gt;
  gt.regime = retrieval::parse_regime(regime);
  gt.threshold = threshold ? *threshold : (gt.regime == retrieval::Regime::Frame ? 10.0 : 25.0);
  const auto db = retrieval::DescriptorDb::from_table(io::read_spdb(db_path));
  const auto queries = retrieval::DescriptorDb::from_table(io::read_spdb(q_path));
  const auto report = retrieval::evaluate(db, queries, gt, parse_ks(ks_text), g.threads);
  std::cout << report.to_table();
  if (!json_out.empty()) {
    auto out = open_text(json_out);
    out << report.to_json() << '\n';
  }
  return kOk;
}

// --------------------------------------------------------------------- pca

int cmd_pca(const std::string& db_path, std::size_t dim, bool whiten, const std::string& out,
            const std::string& apply_out) {
  const auto table = io::read_spdb(db_path);
  const auto db = retrieval::DescriptorDb::from_table(table);
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto r = db.row(i);
    rows.push_back(Tensor::vector(std::vector<double>(r.begin(), r.end())));
  }
  const auto model = pca_fit(rows, dim, whiten);
  io::Checkpoint ck;
  nlohmann::ordered_json meta;
  meta["kind"] = "pca";
  meta["whiten"] = whiten;
  ck.meta = meta.dump();
  ck.tensors = {{"pca.mean", model.mean}, {"pca.basis", model.basis}, {"pca.eigenvalues", model.eigenvalues}};
  io::write_checkpoint(out, ck);
  std::cout << "PCA " << model.in_dim() << " -> " << model.out_dim() << (whiten ? " (whitened)" : "") << ", model "
            << out << '\n';
  if (!apply_out.empty()) {
    const auto reduced = pca_apply_all(model, rows);
    io::write_spdb(apply_out, retrieval::DescriptorDb::build(reduced, db.meta()).to_table());
    std::cout << "wrote reduced descriptors to " << apply_out << '\n';
  }
  return kOk;
}

// --------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& head, int seeds, double tol, const Globals& g) {
  std::vector<std::string> names;
  if (head == "all") {
    names = gradcheck_components();
  } else {
    names.push_back(head);
  }
  bool ok = true;
  for (const auto& name : names) {
    double worst = 0.0;
    std::string reason;
    for (int s = 0; s < seeds; ++s) {
      GradCheckOptions opts;
      opts.seed = g.seed + static_cast<std::uint64_t>(s);
      opts.tol = tol;
      const auto r = gradcheck_component(name, opts);
      worst = std::max(worst, r.max_rel_error);
      if (!r.passed && reason.empty()) reason = r.reason;
    }
    const bool pass = worst < tol;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << std::left << std::setw(10) << name << " max rel error " << worst
              << (reason.empty() ? "" : "  (" + reason + ")") << '\n';
  }
  return ok ? kOk : kFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Place-recognition toolkit: label alignment, training, extraction and evaluation"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (1 = deterministic mode)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();

  AlignOpts align;
  auto* c_align = app.add_subcommand("align", "Build unified place labels from UTM records");
  c_align->add_option("--records", align.records, "Records file (.csv or JSON lines)")->required();
  c_align->add_option("--out", align.out, "Output labels (JSON lines)")->required();
  c_align->add_option("--M", align.grid.cell_size, "Grid cell size in metres")->capture_default_str();
  c_align->add_option("--alpha", align.grid.heading_bin, "Heading bin in degrees")->capture_default_str();
  c_align->add_option("--N", align.grid.pos_groups, "Position groups per axis")->capture_default_str();
  c_align->add_option("--L", align.grid.heading_groups, "Heading groups")->capture_default_str();
  c_align->add_option("--min-inliers", align.grid.min_inliers, "Minimum inliers for panorama subclasses")
      ->capture_default_str();
  c_align->add_option("--features-dir", align.features_dir, "Feature files for panorama matching (optional)");

  synth::WorldSpec world;
  std::string synth_out;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic world");
  c_synth->add_option("--out", synth_out, "Output directory")->required();
  c_synth->add_option("--places", world.n_places, "Number of places")->capture_default_str();
  c_synth->add_option("--images", world.imgs_per_place, "Images per place")->capture_default_str();
  c_synth->add_option("--channels", world.channels, "Channels C")->capture_default_str();
  c_synth->add_option("--height", world.height, "Map height H")->capture_default_str();
  c_synth->add_option("--width", world.width, "Map width W")->capture_default_str();
  c_synth->add_option("--sigma", world.sigma, "Intra-class noise")->capture_default_str();
  c_synth->add_option("--separation", world.separation, "Prototype scale")->capture_default_str();
  c_synth->add_option("--spacing", world.spacing, "Metres between places")->capture_default_str();
  c_synth->add_option("--noise-fraction", world.noise_channel_fraction, "Share of nuisance-only channels")
      ->capture_default_str();
  c_synth->add_option("--max-shift", world.max_shift, "Maximum horizontal shift")->capture_default_str();

  TrainOpts tr;
  auto* c_train = app.add_subcommand("train", "Train a head (and backbone tail) with the multi-similarity loss");
  c_train->add_option("--labels", tr.labels, "Labels (JSON lines)")->required();
  c_train->add_option("--features-dir", tr.features_dir, "Directory of <image_id>.spfm files")->required();
  c_train->add_option("--head", tr.head, "Head")
      ->check(CLI::IsMember({"gem", "g2m", "netvlad", "nvl", "nvl-ft2"}))
      ->capture_default_str();
  c_train->add_option("--stage", tr.stage, "Stage (2 and both apply to nvl-ft2)")
      ->check(CLI::IsMember({"1", "2", "both"}))
      ->capture_default_str();
  c_train->add_option("--lr", tr.lr, "Learning rate")->capture_default_str();
  c_train->add_option("--batch", tr.batch, "Batch size")->capture_default_str();
  c_train->add_option("--places-per-batch", tr.places_per_batch, "Places per batch")->capture_default_str();
  c_train->add_option("--epochs", tr.epochs, "Stage-1 epochs")->capture_default_str();
  c_train->add_option("--epochs2", tr.epochs2, "Stage-2 epochs (0 = half of stage 1)")->capture_default_str();
  c_train->add_option("--warmup", tr.warmup, "Linear warm-up steps (0 = off)")->capture_default_str();
  c_train->add_option("--out", tr.out, "Output checkpoint")->required();
  c_train->add_option("--init", tr.init, "Stage-1 checkpoint for --stage 2");
  c_train->add_option("--log", tr.log, "Training log (default <out>.log.jsonl)");
  c_train->add_option("--rank", tr.model.g2m_rank, "G2M gate rank")->capture_default_str();
  c_train->add_option("--dim", tr.model.out_dim, "GeM/G2M output dimension")->capture_default_str();
  c_train->add_option("--clusters", tr.model.clusters, "NetVLAD clusters")->capture_default_str();
  c_train->add_option("--proj-dim", tr.model.proj_dim, "NVL per-cluster dimension")->capture_default_str();
  c_train->add_option("--channels", tr.model.channels, "Input channels")->capture_default_str();
  c_train->add_option("--backbone-depth", tr.model.backbone_depth, "Residual token blocks")->capture_default_str();
  c_train->add_option("--trainable-tail", tr.model.trainable_tail, "Trainable backbone blocks")->capture_default_str();

  std::string ex_ckpt, ex_dir, ex_out, ex_meta, ex_records;
  auto* c_extract = app.add_subcommand("extract", "Describe feature files into a descriptor db");
  c_extract->add_option("--ckpt", ex_ckpt, "Checkpoint")->required();
  c_extract->add_option("--features-dir", ex_dir, "Directory of .spfm files")->required();
  c_extract->add_option("--out", ex_out, "Output .spdb")->required();
  c_extract->add_option("--meta", ex_meta, "Row metadata (JSON lines keyed by image_id)");
  c_extract->add_option("--records", ex_records, "Records file supplying east/north");

  std::string ev_db, ev_q, ev_regime = "geo", ev_ks = "1,5,10", ev_json;
  std::optional<double> ev_threshold;
  auto* c_eval = app.add_subcommand("evaluate", "Recall@K of queries against a db");
  c_eval->add_option("--db", ev_db, "Database .spdb")->required();
  c_eval->add_option("--queries", ev_q, "Query .spdb")->required();
  c_eval->add_option("--regime", ev_regime, "geo|frame|exact")
      ->check(CLI::IsMember({"geo", "frame", "exact"}))
      ->capture_default_str();
  c_eval->add_option("--threshold", ev_threshold, "Metres (geo) or frames (frame); default 25 / 10");
  c_eval->add_option("--ks", ev_ks, "Comma-separated K values")->capture_default_str();
  c_eval->add_option("--json", ev_json, "Also write the report as JSON");

  std::string pca_db, pca_out, pca_apply_out;
  std::size_t pca_dim = 8192;
  bool pca_whiten = false;
  auto* c_pca = app.add_subcommand("pca", "Fit a PCA reduction on a descriptor db");
  c_pca->add_option("--db", pca_db, "Descriptor db")->required();
  c_pca->add_option("--dim", pca_dim, "Output dimension")->capture_default_str();
  c_pca->add_flag("--whiten", pca_whiten, "Whiten the projection");
  c_pca->add_option("--out", pca_out, "Output model (checkpoint container)")->required();
  c_pca->add_option("--apply-out", pca_apply_out, "Also write the reduced db here");

  std::string gc_head = "all";
  int gc_seeds = 1;
  double gc_tol = 1e-4;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference checks of every backward pass");
  std::vector<std::string> gc_choices{"all"};
  for (const auto& n : gradcheck_components()) gc_choices.push_back(n);
  c_grad->add_option("--head", gc_head, "Component or all")->check(CLI::IsMember(gc_choices))->capture_default_str();
  c_grad->add_option("--seeds", gc_seeds, "Random instances per component")->capture_default_str();
  c_grad->add_option("--tol", gc_tol, "Relative error tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kParse;
  }

  spdlog::set_level(spdlog::level::from_str(g.log_level));
  {
    // Globals plus the options of the chosen subcommand.
    const std::string active = app.get_subcommands().front()->get_name() + ".";
    std::istringstream all(app.config_to_str(true, false));
    std::cout << "# resolved configuration\n";
    for (std::string line; std::getline(all, line);) {
      const auto eq = line.find('=');
      const auto key = line.substr(0, eq);
      if (key.find('.') == std::string::npos || key.rfind(active, 0) == 0) std::cout << line << '\n';
    }
    std::cout << std::flush;
  }

  try {
    if (*c_align) return cmd_align(align, g);
    if (*c_synth) return cmd_synth(world, synth_out, g);
    if (*c_train) return cmd_train(tr, g);
    if (*c_extract) return cmd_extract(ex_ckpt, ex_dir, ex_out, ex_meta, ex_records, g);
    if (*c_eval) return cmd_evaluate(ev_db, ev_q, ev_regime, ev_threshold, ev_ks, ev_json, g);
    if (*c_pca) return cmd_pca(pca_db, pca_dim, pca_whiten, pca_out, pca_apply_out);
    if (*c_grad) return cmd_gradcheck(gc_head, gc_seeds, gc_tol, g);
  } catch (const Error& e) {
    spdlog::error("{} error: {}", to_string(e.code()), e.what());
    return exit_code(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFail;
  }
  return kFail;
}
