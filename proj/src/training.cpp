#include "vpr/training.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <utility>

#include "json.hpp"

namespace vpr::train {

namespace {

void require(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) throw Error(code, msg);
}

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kProjectionStream = 0x5eed2;

}  // namespace

// ------------------------------------------------------------------ sampler

void BatchSpec::validate() const {
  require(places_per_batch >= 2, ErrorCode::InvalidArgument, "places per batch must be at least 2");
  require(images_per_place >= 2, ErrorCode::InvalidArgument, "images per place must be at least 2");
}

BatchSampler::BatchSampler(const std::vector<std::int64_t>& class_of_item, const BatchSpec& spec) : spec_(spec) {
  spec.validate();
  std::map<std::int64_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < class_of_item.size(); ++i) by_class[class_of_item[i]].push_back(i);
  for (auto& [cls, items] : by_class) {
    if (items.size() < spec.images_per_place) {
      ++skipped_;
      continue;
    }
    classes_.push_back(cls);
    members_.push_back(std::move(items));
  }
  if (skipped_) {
    spdlog::warn("batch sampler: skipped {} classes with fewer than {} images", skipped_, spec.images_per_place);
  }
  if (classes_.size() < spec.places_per_batch) {
    throw Error(ErrorCode::Constraint, "batch sampler needs " + std::to_string(spec.places_per_batch) +
                                           " classes with at least " + std::to_string(spec.images_per_place) +
                                           " images, found " + std::to_string(classes_.size()) + " (short by " +
                                           std::to_string(spec.places_per_batch - classes_.size()) + ")");
  }
}

std::vector<MiniBatch> BatchSampler::epoch(std::size_t epoch_index) const {
  auto rng = seeded(spec_.seed, epoch_index);
  std::vector<std::size_t> order(classes_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<MiniBatch> batches;
  const std::size_t n_batches = order.size() / spec_.places_per_batch;
  for (std::size_t b = 0; b < n_batches; ++b) {
    MiniBatch mb;
    for (std::size_t j = 0; j < spec_.places_per_batch; ++j) {
      const std::size_t c = order[b * spec_.places_per_batch + j];
      auto pool = members_[c];
      std::shuffle(pool.begin(), pool.end(), rng);
      for (std::size_t k = 0; k < spec_.images_per_place; ++k) {
        mb.items.push_back(pool[k]);
        mb.classes.push_back(classes_[c]);
      }
    }
    batches.push_back(std::move(mb));
  }
  return batches;
}

// ------------------------------------------------------------------- config

void TrainConfig::validate() const {
  require(std::isfinite(lr) && lr >= 0.0, ErrorCode::InvalidArgument, "learning rate must be finite and >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorCode::InvalidArgument,
          "Adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, ErrorCode::InvalidArgument, "Adam epsilon must be positive");
  require(epochs_stage1 >= 1, ErrorCode::InvalidArgument, "stage-1 epochs must be at least 1");
  require(!epochs_stage2 || *epochs_stage2 >= 1, ErrorCode::InvalidArgument, "stage-2 epochs must be at least 1");
  require(threads >= 1, ErrorCode::InvalidArgument, "threads must be at least 1");
  loss.validate();
}

int TrainConfig::stage2_epochs() const { return epochs_stage2 ? *epochs_stage2 : std::max(1, epochs_stage1 / 2); }

double TrainConfig::lr_at(std::size_t step) const {
  if (warmup_steps == 0 || step >= warmup_steps) return lr;
  return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

const char* to_string(Head h) {
  switch (h) {
    case Head::Gem: return "gem";
    case Head::G2m: return "g2m";
    case Head::NetVlad: return "netvlad";
    case Head::Nvl: return "nvl";
  }
  return "?";
}

Head parse_head(const std::string& s) {
  if (s == "gem") return Head::Gem;
  if (s == "g2m") return Head::G2m;
  if (s == "netvlad") return Head::NetVlad;
  if (s == "nvl") return Head::Nvl;
  throw Error(ErrorCode::Parse, "unknown head '" + s + "'");
}

void ModelSpec::validate() const {
  require(channels >= 1, ErrorCode::InvalidArgument, "model needs at least one channel");
  switch (head) {
    case Head::G2m:
      require(g2m_rank >= 1 && g2m_rank < channels, ErrorCode::InvalidArgument,
              "G2M rank must satisfy 1 <= r < C (r=" + std::to_string(g2m_rank) + ", C=" + std::to_string(channels) + ")");
      [[fallthrough]];
    case Head::Gem:
      require(out_dim >= 1, ErrorCode::InvalidArgument, "output dimension must be positive");
      break;
    case Head::Nvl:
      require(proj_dim >= 1 && proj_dim <= channels, ErrorCode::InvalidArgument,
              "NVL projection dimension C'=" + std::to_string(proj_dim) + " must be in [1, C=" +
                  std::to_string(channels) + "]");
      [[fallthrough]];
    case Head::NetVlad:
      require(clusters >= 1, ErrorCode::InvalidArgument, "NetVLAD needs at least one cluster");
      break;
  }
}

std::string ModelSpec::to_json() const {
  nlohmann::ordered_json j;
  j["head"] = to_string(head);
  j["channels"] = channels;
  j["backbone_depth"] = backbone_depth;
  j["trainable_tail"] = trainable_tail;
  j["g2m_rank"] = g2m_rank;
  j["out_dim"] = out_dim;
  j["clusters"] = clusters;
  j["proj_dim"] = proj_dim;
  return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelSpec s;
    s.head = parse_head(j.at("head").get<std::string>());
    s.channels = j.at("channels").get<std::size_t>();
    s.backbone_depth = j.at("backbone_depth").get<std::size_t>();
    s.trainable_tail = j.at("trainable_tail").get<std::size_t>();
    s.g2m_rank = j.at("g2m_rank").get<std::size_t>();
    s.out_dim = j.at("out_dim").get<std::size_t>();
    s.clusters = j.at("clusters").get<std::size_t>();
    s.proj_dim = j.at("proj_dim").get<std::size_t>();
    return s;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::Parse, std::string("checkpoint metadata: ") + e.what());
  }
}

// -------------------------------------------------------------------- model

namespace {

// Zero-valued model of the right shapes. Token backbones use a 1x1 patch
// embedding, which is never applied to token-map inputs.
Model skeleton(const ModelSpec& spec) {
  spec.validate();
  const std::size_t C = spec.channels;
  Model m;
  m.spec = spec;
  if (spec.backbone_depth > 0) {
    ToyBackbone b;
    b.patch = 1;
    b.trainable_tail = spec.trainable_tail;
    b.patch_embed = Tensor::zeros({3, C});
    for (std::size_t i = 0; i < spec.backbone_depth; ++i) b.blocks.push_back({Tensor::zeros({C, C}), Tensor::zeros({C})});
    m.backbone = std::move(b);
  }
  auto vlad_zero = [&] {
    return NetVladParams{Tensor::zeros({spec.clusters, C}), Tensor::zeros({spec.clusters, C}),
                         Tensor::zeros({spec.clusters})};
  };
  switch (spec.head) {
    case Head::Gem:
      m.head = GemFcParams{GemParams{Tensor::zeros({C})}, Tensor::zeros({C, spec.out_dim}), Tensor::zeros({spec.out_dim})};
      break;
    case Head::G2m: {
      G2mParams p;
      p.main_p = GemParams{Tensor::zeros({C})};
      p.gca = GcaParams::zeros(C, spec.g2m_rank);
      p.gca.gate_p = GemParams{Tensor::zeros({C})};
      p.w_fc = Tensor::zeros({C, spec.out_dim});
      p.b_fc = Tensor::zeros({spec.out_dim});
      m.head = std::move(p);
      break;
    }
    case Head::NetVlad: m.head = vlad_zero(); break;
    case Head::Nvl: m.head = NvlParams{vlad_zero(), Tensor::zeros({C, spec.proj_dim})}; break;
  }
  return m;
}

}  // namespace

Model Model::init(const ModelSpec& spec, std::span<const FeatureMap> sample, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Model m = skeleton(spec);
  if (spec.backbone_depth > 0) m.backbone = ToyBackbone::init(spec.channels, spec.backbone_depth, rng, 1, spec.trainable_tail);
  switch (spec.head) {
    case Head::Gem: m.head = GemFcParams::init(spec.channels, spec.out_dim, rng); break;
    case Head::G2m: m.head = G2mParams::init(spec.channels, spec.g2m_rank, spec.out_dim, rng); break;
    case Head::NetVlad:
    case Head::Nvl: {
      // Location vectors from an evenly strided subset of the sample.
      const std::size_t cap = 40 * spec.clusters;
      std::size_t total = 0;
      for (const auto& fm : sample) total += fm.locations();
      NetVladParams vlad;
      if (total < spec.clusters) {
        if (!sample.empty()) spdlog::warn("NetVLAD init: {} location vectors for {} clusters, using random centres", total, spec.clusters);
        vlad = NetVladParams::random(spec.clusters, spec.channels, rng);
      } else {
        const std::size_t stride = std::max<std::size_t>(1, total / cap);
        std::vector<double> rows;
        std::size_t idx = 0;
        for (const auto& in : sample) {
          const FeatureMap fm = m.features(in);
          for (std::size_t loc = 0; loc < fm.locations(); ++loc, ++idx) {
            if (idx % stride != 0) continue;
            for (std::size_t c = 0; c < fm.channels; ++c) rows.push_back(fm.at(c, loc));
          }
        }
        const std::size_t n = rows.size() / spec.channels;
        vlad = NetVladParams::from_centers(kmeans(Tensor({n, spec.channels}, std::move(rows)), spec.clusters, seed, 10));
      }
      if (spec.head == Head::NetVlad) {
        m.head = std::move(vlad);
      } else {
        m.head = NvlParams::init(std::move(vlad), spec.proj_dim, rng);
      }
      break;
    }
  }
  return m;
}

NamedTensors Model::tensors() {
  NamedTensors out;
  if (backbone) out = named_tensors(*backbone, "backbone");
  NamedTensors h = std::visit(
      [](auto& p) -> NamedTensors {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, NetVladParams>) {
          return named_tensors(p, "head.vlad");
        } else {
          return named_tensors(p, "head");
        }
      },
      head);
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

ConstNamedTensors Model::tensors() const {
  ConstNamedTensors out;
  for (auto& [name, t] : const_cast<Model*>(this)->tensors()) out.emplace_back(name, t);
  return out;
}

std::size_t Model::out_dim() const {
  switch (spec.head) {
    case Head::Gem:
    case Head::G2m: return spec.out_dim;
    case Head::NetVlad: return netvlad_dim(spec.channels, spec.clusters);
    case Head::Nvl: return nvl_dim(spec.clusters, spec.proj_dim);
  }
  return 0;
}

std::size_t Model::parameter_count() const { return vpr::parameter_count(tensors()); }

FeatureMap Model::features(const FeatureMap& input) const {
  if (!backbone) return input;
  return backbone_forward_tokens(input, *backbone, nullptr);
}

Descriptor Model::describe(const FeatureMap& input) const {
  const FeatureMap fm = features(input);
  return std::visit(
      [&](const auto& p) -> Descriptor {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, GemFcParams>) return gem_fc_forward(fm, p);
        if constexpr (std::is_same_v<P, G2mParams>) return g2m_forward(fm, p);
        if constexpr (std::is_same_v<P, NetVladParams>) return netvlad_forward(fm, p);
        if constexpr (std::is_same_v<P, NvlParams>) return nvl_forward(fm, p);
      },
      head);
}

io::Checkpoint Model::to_checkpoint(io::Stage stage) const {
  io::Checkpoint ck;
  ck.stage = stage;
  ck.meta = spec.to_json();
  for (const auto& [name, t] : tensors()) ck.tensors.emplace_back(name, *t);
  return ck;
}

Model Model::from_checkpoint(const io::Checkpoint& ckpt) {
  Model m = skeleton(ModelSpec::from_json(ckpt.meta));
  for (auto& [name, t] : m.tensors()) {
    if (!ckpt.has(name)) throw Error(ErrorCode::Parse, "checkpoint is missing tensor " + name);
    const Tensor& src = ckpt.get(name);
    if (src.shape() != t->shape()) {
      throw Error(ErrorCode::Parse, "checkpoint tensor " + name + " has shape " + shape_string(src.shape()) +
                                        ", expected " + shape_string(t->shape()));
    }
    *t = src;
  }
  if (ckpt.tensors.size() != m.tensors().size()) {
    throw Error(ErrorCode::Parse, "checkpoint has tensors the model does not use");
  }
  return m;
}

Model zeros_like(const Model& m) { return skeleton(m.spec); }

std::vector<std::string> trainable_set(const Model& m, io::Stage stage) {
  std::vector<std::string> out;
  if (stage == io::Stage::Stage2) {
    if (m.spec.head == Head::Nvl) out.push_back("head.w_proj");
    return out;
  }
  if (m.backbone) out = trainable_names(*m.backbone, "backbone");
  for (const auto& [name, t] : m.tensors()) {
    if (name.rfind("head.", 0) == 0) out.push_back(name);
  }
  return out;
}

std::size_t trainable_count(const Model& m, io::Stage stage) {
  const auto names = trainable_set(m, stage);
  std::size_t n = 0;
  for (const auto& [name, t] : m.tensors()) {
    if (std::find(names.begin(), names.end(), name) != names.end()) n += t->size();
  }
  return n;
}

std::vector<Descriptor> describe_all(const Model& m, std::span<const FeatureMap> inputs, int threads) {
  std::vector<Descriptor> out(inputs.size());
  parallel_for(inputs.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = m.describe(inputs[i]);
  });
  return out;
}

// --------------------------------------------------------------------- Adam

void Adam::step(const NamedTensors& params, const NamedTensors& grads, const std::vector<std::string>& trainable,
                double lr) {
  require(params.size() == grads.size(), ErrorCode::InvalidArgument, "Adam: parameter/gradient lists differ");
  ++t_;
  if (lr == 0.0) return;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (grads[i].first != name) throw Error(ErrorCode::InvalidArgument, "Adam: gradient order mismatch at " + name);
    if (std::find(trainable.begin(), trainable.end(), name) == trainable.end()) continue;
    const Tensor& g = *grads[i].second;
    auto it = std::find_if(moments_.begin(), moments_.end(), [&](const auto& e) { return e.first == name; });
    if (it == moments_.end()) {
      moments_.push_back({name, {Tensor::zeros_like(*p), Tensor::zeros_like(*p)}});
      it = moments_.end() - 1;
    }
    auto& [m, v] = it->second;
    for (std::size_t j = 0; j < p->size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      (*p)[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

// ----------------------------------------------------------------- training

void TrainSet::validate() const {
  require(!maps.empty(), ErrorCode::InvalidArgument, "training set is empty");
  require(maps.size() == classes.size(), ErrorCode::InvalidArgument, "training set needs one class per feature map");
}

namespace {

using HeadTrace = std::variant<GemFcTrace, G2mTrace, NetVladTrace, NvlTrace>;

struct ItemTrace {
  std::optional<BackboneTrace> backbone;
  FeatureMap fm;
  HeadTrace head;
};

ItemTrace forward_item(const Model& m, const FeatureMap& input) {
  ItemTrace tr;
  if (m.backbone) {
    tr.backbone.emplace();
    tr.fm = backbone_forward_tokens(input, *m.backbone, &*tr.backbone);
  } else {
    tr.fm = input;
  }
  tr.head = std::visit(
      [&](const auto& p) -> HeadTrace {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, GemFcParams>) return gem_fc_trace(tr.fm, p);
        if constexpr (std::is_same_v<P, G2mParams>) return g2m_trace(tr.fm, p);
        if constexpr (std::is_same_v<P, NetVladParams>) return netvlad_trace(tr.fm, p);
        if constexpr (std::is_same_v<P, NvlParams>) return nvl_trace(tr.fm, p);
      },
      m.head);
  return tr;
}

const Descriptor& output_of(const HeadTrace& t) {
  return std::visit([](const auto& x) -> const Descriptor& { return x.out; }, t);
}

void backward_item(const Model& m, const ItemTrace& tr, std::span<const double> d_out, Model& grad) {
  const bool into_backbone = m.backbone && m.backbone->first_trainable() < m.backbone->blocks.size();
  FeatureMapGrad d_fm;
  std::span<double> d_values;
  if (into_backbone) {
    d_fm.values = Tensor::zeros_like(tr.fm.values);
    d_values = d_fm.values.span();
  }
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        auto& g = std::get<P>(grad.head);
        if constexpr (std::is_same_v<P, GemFcParams>) {
          gem_fc_backward(tr.fm, p, std::get<GemFcTrace>(tr.head), d_out, &g, d_values);
        } else if constexpr (std::is_same_v<P, G2mParams>) {
          g2m_backward(tr.fm, p, std::get<G2mTrace>(tr.head), d_out, &g, d_values);
        } else if constexpr (std::is_same_v<P, NetVladParams>) {
          netvlad_backward(p, std::get<NetVladTrace>(tr.head), d_out, &g, d_values);
        } else {
          nvl_backward(p, std::get<NvlTrace>(tr.head), d_out, &g, d_values);
        }
      },
      m.head);
  if (into_backbone) backbone_backward(*m.backbone, *tr.backbone, d_fm, &*grad.backbone);
}

bool all_finite(const ConstNamedTensors& tensors) {
  return std::all_of(tensors.begin(), tensors.end(), [](const auto& e) { return e.second->all_finite(); });
}

void log_step(std::ostream* log, std::size_t step, double loss, double lr, io::Stage stage) {
  if (!log) return;
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  j["stage"] = io::to_string(stage);
  *log << j.dump() << '\n';
}

}  // namespace

TrainResult train_stage1(const TrainSet& data, Model model, const TrainConfig& cfg, const BatchSpec& spec,
                         std::ostream* log) {
  cfg.validate();
  data.validate();
  if (cfg.lr == 0.0) spdlog::warn("learning rate is zero; parameters will not change");
  const BatchSampler sampler(data.classes, spec);
  const auto trainable = trainable_set(model, io::Stage::Stage1);
  Adam adam(cfg.beta1, cfg.beta2, cfg.adam_eps);

  TrainResult res;
  res.model = std::move(model);
  res.stage = io::Stage::Stage1;
  res.trainable_params = trainable_count(res.model, io::Stage::Stage1);
  Model& m = res.model;
  std::optional<Model> last_good;
  for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    double total = 0.0;
    const auto batches = sampler.epoch(static_cast<std::size_t>(epoch));
    for (const auto& batch : batches) {
      std::vector<ItemTrace> traces(batch.items.size());
      std::vector<Tensor> d_desc;
      double loss = std::numeric_limits<double>::quiet_NaN();
      try {
        parallel_for(batch.items.size(), cfg.threads, [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) traces[i] = forward_item(m, data.maps[batch.items[i]]);
        });
        std::vector<Descriptor> descs;
        descs.reserve(traces.size());
        for (const auto& t : traces) descs.push_back(output_of(t.head));
        loss = ms_loss_descriptors(descs, batch.classes, cfg.loss, &d_desc);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFinite) throw;
      }
      if (!std::isfinite(loss)) {
        // The parameters that produced this loss are suspect; fall back to the last ones with a finite loss.
        if (last_good) m = *last_good;
        res.aborted = true;
        res.abort_reason = "non-finite loss at step " + std::to_string(res.steps);
        spdlog::error("stage 1: {}", res.abort_reason);
        return res;
      }
      Model grad = zeros_like(m);
      for (std::size_t i = 0; i < traces.size(); ++i) backward_item(m, traces[i], d_desc[i].span(), grad);

      last_good = m;
      const Model& before = *last_good;
      const double lr = cfg.lr_at(res.steps);
      adam.step(m.tensors(), grad.tensors(), trainable, lr);
      if (!all_finite(std::as_const(m).tensors())) {
        m = before;
        res.aborted = true;
        res.abort_reason = "non-finite parameters after step " + std::to_string(res.steps);
        spdlog::error("stage 1: {}", res.abort_reason);
        return res;
      }
      log_step(log, res.steps, loss, lr, io::Stage::Stage1);
      total += loss;
      ++res.steps;
    }
    res.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    spdlog::info("stage 1 epoch {}: mean loss {:.6f}", epoch + 1, res.epoch_loss.back());
  }
  return res;
}

TrainResult train_stage2_ft2(const io::Checkpoint& stage1, const TrainSet& data, std::size_t proj_dim,
                             const TrainConfig& cfg, const BatchSpec& spec, std::ostream* log) {
  if (stage1.stage != io::Stage::Stage1) {
    throw Error(ErrorCode::StageMismatch,
                std::string("stage 2 needs a stage1 checkpoint, got ") + io::to_string(stage1.stage));
  }
  cfg.validate();
  data.validate();
  const Model base = Model::from_checkpoint(stage1);
  if (base.spec.head != Head::NetVlad) {
    throw Error(ErrorCode::StageMismatch, std::string("stage 2 needs NetVLAD parameters, checkpoint holds a ") +
                                              to_string(base.spec.head) + " head");
  }
  if (cfg.lr == 0.0) spdlog::warn("learning rate is zero; parameters will not change");

  ModelSpec s2 = base.spec;
  s2.head = Head::Nvl;
  s2.proj_dim = proj_dim;
  s2.validate();
  auto rng = seeded(spec.seed, kProjectionStream);
  TrainResult res;
  res.model = Model{s2, base.backbone, NvlParams::init(std::get<NetVladParams>(base.head), proj_dim, rng)};
  res.stage = io::Stage::Stage2;
  Model& m = res.model;
  auto& nvl = std::get<NvlParams>(m.head);
  res.trainable_params = trainable_count(m, io::Stage::Stage2);

  // Frozen part: backbone and intra-normalised residuals, computed once.
  std::vector<VladCore> cores(data.maps.size());
  parallel_for(data.maps.size(), cfg.threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      VladCore full = vlad_core(m.features(data.maps[i]), nvl.vlad);
      VladCore& c = cores[i];
      c.clusters = full.clusters;
      c.channels = full.channels;
      c.locations = full.locations;
      c.normalized = std::move(full.normalized);
    }
  });

  const BatchSampler sampler(data.classes, spec);
  Adam adam(cfg.beta1, cfg.beta2, cfg.adam_eps);
  const std::vector<std::string> trainable{"head.w_proj"};
  std::optional<Tensor> last_good;
  for (int epoch = 0; epoch < cfg.stage2_epochs(); ++epoch) {
    double total = 0.0;
    const auto batches = sampler.epoch(static_cast<std::size_t>(epoch));
    for (const auto& batch : batches) {
      std::vector<NvlTrace> traces(batch.items.size());
      std::vector<Tensor> d_desc;
      double loss = std::numeric_limits<double>::quiet_NaN();
      try {
        parallel_for(batch.items.size(), cfg.threads, [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) traces[i] = nvl_from_core(cores[batch.items[i]], nvl);
        });
        std::vector<Descriptor> descs;
        for (const auto& t : traces) descs.push_back(t.out);
        loss = ms_loss_descriptors(descs, batch.classes, cfg.loss, &d_desc);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFinite) throw;
      }
      if (!std::isfinite(loss)) {
        if (last_good) nvl.w_proj = *last_good;
        res.aborted = true;
        res.abort_reason = "non-finite loss at step " + std::to_string(res.steps);
        spdlog::error("stage 2: {}", res.abort_reason);
        return res;
      }
      Tensor grad = Tensor::zeros_like(nvl.w_proj);
      for (std::size_t i = 0; i < traces.size(); ++i) nvl_projection_backward(nvl, traces[i], d_desc[i].span(), &grad);

      last_good = nvl.w_proj;
      const Tensor& before = *last_good;
      const double lr = cfg.lr_at(res.steps);
      adam.step({{"head.w_proj", &nvl.w_proj}}, {{"head.w_proj", &grad}}, trainable, lr);
      if (!nvl.w_proj.all_finite()) {
        nvl.w_proj = before;
        res.aborted = true;
        res.abort_reason = "non-finite projection after step " + std::to_string(res.steps);
        spdlog::error("stage 2: {}", res.abort_reason);
        return res;
      }
      log_step(log, res.steps, loss, lr, io::Stage::Stage2);
      total += loss;
      ++res.steps;
    }
    res.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    spdlog::info("stage 2 epoch {}: mean loss {:.6f}", epoch + 1, res.epoch_loss.back());
  }
  return res;
}

}  // namespace vpr::train
