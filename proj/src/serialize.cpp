#include "unorm/serialize.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace unorm {

using nlohmann::json;

namespace {

Vector vector_from_json(const json& j) { return j.get<Vector>(); }

json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != m.size()) {
    throw std::runtime_error("matrix_from_json: data length mismatch");
  }
  m.values() = data;
  return m;
}

json linear_to_json(const LinearLayer& l) {
  return json{{"weight", matrix_to_json(l.weight)}, {"bias", l.bias}};
}

LinearLayer linear_from_json(const json& j) {
  LinearLayer l;
  l.weight = matrix_from_json(j.at("weight"));
  l.bias = j.at("bias").get<Vector>();
  return l;
}

json spec_to_json(const NormMethodSpec& spec) {
  return json{{"method", std::string(method_tag(spec.method))},
              {"epsilon", spec.epsilon},
              {"alpha", spec.alpha},
              {"window_m", spec.window_m},
              {"warmup_steps", spec.warmup_steps},
              {"filtration", spec.filtration}};
}

NormMethodSpec spec_from_json(const json& j) {
  NormMethodSpec spec;
  spec.method = method_from_tag(j.at("method").get<std::string>());
  spec.epsilon = j.value("epsilon", spec.epsilon);
  spec.alpha = j.value("alpha", spec.alpha);
  spec.window_m = j.value("window_m", spec.window_m);
  spec.warmup_steps = j.value("warmup_steps", spec.warmup_steps);
  spec.filtration = j.value("filtration", spec.filtration);
  return spec;
}

json state_to_json_obj(const NormLayerState& state, const NormMethodSpec& spec) {
  json windows = json::array();
  for (const auto& w : state.sigma2_window) windows.push_back(w);
  json grads = json::array();
  for (const auto& w : state.grad_window) grads.push_back(w);
  json events = json::array();
  for (const auto& e : state.outlier_events) {
    events.push_back(json::array({e.step, e.channel_triggers}));
  }
  return json{{"version", kStateVersion},
              {"spec", spec_to_json(spec)},
              {"gamma", state.gamma},
              {"beta", state.beta},
              {"run_mu", state.run_mu},
              {"run_sigma2", state.run_sigma2},
              {"sigma2_window", windows},
              {"grad_window", grads},
              {"psi", state.psi},
              {"ema_sigma2", state.ema_sigma2},
              {"step", state.step},
              {"outlier_events", events}};
}

LoadedState state_from_json_obj(const json& j) {
  if (j.at("version").get<std::string>() != kStateVersion) {
    throw std::runtime_error("state_from_json: unsupported version");
  }
  LoadedState out;
  out.spec = spec_from_json(j.at("spec"));
  out.state.gamma = vector_from_json(j.at("gamma"));
  out.state.beta = vector_from_json(j.at("beta"));
  out.state.run_mu = vector_from_json(j.at("run_mu"));
  out.state.run_sigma2 = vector_from_json(j.at("run_sigma2"));
  for (const auto& w : j.at("sigma2_window")) {
    out.state.sigma2_window.push_back(vector_from_json(w));
  }
  for (const auto& w : j.at("grad_window")) {
    out.state.grad_window.push_back(vector_from_json(w));
  }
  out.state.psi = vector_from_json(j.at("psi"));
  out.state.ema_sigma2 = vector_from_json(j.at("ema_sigma2"));
  out.state.step = j.at("step").get<std::size_t>();
  for (const auto& e : j.at("outlier_events")) {
    out.state.outlier_events.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
  }
  return out;
}

json frozen_norm_to_json(const harness::FrozenNorm& n) {
  if (n.identity) return json{{"identity", true}};
  return json{{"identity", false}, {"gamma", n.gamma}, {"beta", n.beta},
              {"mu", n.mu},        {"sigma2", n.sigma2}, {"eps", n.eps}};
}

harness::FrozenNorm frozen_norm_from_json(const json& j) {
  harness::FrozenNorm n;
  n.identity = j.value("identity", false);
  if (!n.identity) {
    n.gamma = vector_from_json(j.at("gamma"));
    n.beta = vector_from_json(j.at("beta"));
    n.mu = vector_from_json(j.at("mu"));
    n.sigma2 = vector_from_json(j.at("sigma2"));
    n.eps = j.at("eps").get<double>();
  }
  return n;
}

std::string kind_tag(harness::ModelConfig::Kind kind) {
  return kind == harness::ModelConfig::Kind::Mlp ? "mlp" : "mini_transformer";
}

harness::ModelConfig::Kind kind_from_tag(const std::string& tag) {
  if (tag == "mlp") return harness::ModelConfig::Kind::Mlp;
  if (tag == "mini_transformer") return harness::ModelConfig::Kind::MiniTransformer;
  throw std::runtime_error("unknown model kind: " + tag);
}

std::string task_tag(harness::SyntheticTask::Kind kind) {
  return kind == harness::SyntheticTask::Kind::SequenceMeanRegression
             ? "sequence_mean_regression"
             : "token_copy_classification";
}

harness::SyntheticTask::Kind task_from_tag(const std::string& tag) {
  if (tag == "sequence_mean_regression") {
    return harness::SyntheticTask::Kind::SequenceMeanRegression;
  }
  if (tag == "token_copy_classification") {
    return harness::SyntheticTask::Kind::TokenCopyClassification;
  }
  throw std::runtime_error("unknown task kind: " + tag);
}

json model_config_to_json(const harness::ModelConfig& cfg) {
  return json{{"kind", kind_tag(cfg.kind)},
              {"depth", cfg.depth},
              {"channels", cfg.channels},
              {"hidden_multiple", cfg.hidden_multiple},
              {"heads", cfg.heads},
              {"seed", cfg.seed},
              {"norm", spec_to_json(cfg.norm)}};
}

harness::ModelConfig model_config_from_json(const json& j) {
  harness::ModelConfig cfg;
  cfg.kind = kind_from_tag(j.at("kind").get<std::string>());
  cfg.depth = j.value("depth", cfg.depth);
  cfg.channels = j.value("channels", cfg.channels);
  cfg.hidden_multiple = j.value("hidden_multiple", cfg.hidden_multiple);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("norm")) cfg.norm = spec_from_json(j.at("norm"));
  return cfg;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  json j;
  in >> j;
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot open " + path);
  }
  out << text << "\n";
}

}  // namespace

std::string state_to_json(const NormLayerState& state, const NormMethodSpec& spec) {
  return state_to_json_obj(state, spec).dump(2);
}

LoadedState state_from_json(const std::string& text) {
  return state_from_json_obj(json::parse(text));
}

std::string frozen_stats_to_json(const harness::Model& model) {
  json layers = json::array();
  for (const auto* site : model.norm_sites()) {
    const FrozenStats stats = freeze_statistics(site->state);
    layers.push_back(json{{"mu", stats.mu}, {"sigma2", stats.sigma2}});
  }
  return json{{"version", kStatsVersion}, {"layers", layers}}.dump(2);
}

std::vector<FrozenStats> frozen_stats_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.at("version").get<std::string>() != kStatsVersion) {
    throw std::runtime_error("frozen_stats_from_json: unsupported version");
  }
  std::vector<FrozenStats> out;
  for (const auto& layer : j.at("layers")) {
    out.push_back(FrozenStats{vector_from_json(layer.at("mu")),
                              vector_from_json(layer.at("sigma2"))});
  }
  return out;
}

void save_model_json(const harness::Model& model, const std::string& path) {
  const auto& cfg = model.config();
  json blocks = json::array();
  for (const auto& b : const_cast<harness::Model&>(model).blocks()) {
    json jb;
    if (b.has_attention) {
      jb["attn_norm"] = state_to_json_obj(b.attn_norm.state, b.attn_norm.spec);
      jb["wq"] = linear_to_json(b.attn.wq.p);
      jb["wk"] = linear_to_json(b.attn.wk.p);
      jb["wv"] = linear_to_json(b.attn.wv.p);
      jb["wo"] = linear_to_json(b.attn.wo.p);
    }
    jb["ffn_norm"] = state_to_json_obj(b.ffn_norm.state, b.ffn_norm.spec);
    jb["ff1"] = linear_to_json(b.ff1.p);
    jb["ff2"] = linear_to_json(b.ff2.p);
    blocks.push_back(std::move(jb));
  }
  json j{{"version", kModelVersion},
         {"fused", false},
         {"config", model_config_to_json(cfg)},
         {"task_kind", task_tag(model.task_kind())},
         {"blocks", blocks},
         {"readout", linear_to_json(model.readout().p)}};
  auto& mutable_model = const_cast<harness::Model&>(model);
  if (mutable_model.has_final_norm()) {
    j["final_norm"] = state_to_json_obj(mutable_model.final_norm().state,
                                        mutable_model.final_norm().spec);
  }
  write_text_file(path, j.dump(2));
}

void save_frozen_model_json(const harness::FrozenModel& frozen,
                            const harness::ModelConfig& cfg,
                            harness::SyntheticTask::Kind task_kind, const std::string& path) {
  json blocks = json::array();
  for (const auto& b : frozen.blocks) {
    json jb;
    if (b.has_attention) {
      jb["attn_norm_frozen"] = frozen_norm_to_json(b.norm1);
      jb["wq"] = linear_to_json(b.wq);
      jb["wk"] = linear_to_json(b.wk);
      jb["wv"] = linear_to_json(b.wv);
      jb["wo"] = linear_to_json(b.wo);
    }
    jb["ffn_norm_frozen"] = frozen_norm_to_json(b.norm2);
    jb["ff1"] = linear_to_json(b.ff1);
    jb["ff2"] = linear_to_json(b.ff2);
    blocks.push_back(std::move(jb));
  }
  json j{{"version", kModelVersion},
         {"fused", frozen.fused},
         {"config", model_config_to_json(cfg)},
         {"task_kind", task_tag(task_kind)},
         {"blocks", blocks},
         {"readout", linear_to_json(frozen.readout)}};
  if (frozen.has_final_norm) {
    j["final_norm_frozen"] = frozen_norm_to_json(frozen.final_norm);
  }
  write_text_file(path, j.dump(2));
}

LoadedModel load_model_json(const std::string& path) {
  const json j = read_json_file(path);
  if (j.at("version").get<std::string>() != kModelVersion) {
    throw std::runtime_error("load_model_json: unsupported version");
  }
  LoadedModel out;
  out.config = model_config_from_json(j.at("config"));
  out.task_kind = task_from_tag(j.at("task_kind").get<std::string>());
  out.fused = j.value("fused", false);

  const json& blocks = j.at("blocks");
  if (blocks.size() != out.config.depth) {
    throw std::runtime_error("load_model_json: block count does not match depth");
  }

  if (!out.fused) {
    out.model = harness::Model(out.config, out.task_kind);
    auto& model_blocks = out.model.blocks();
    for (std::size_t i = 0; i < model_blocks.size(); ++i) {
      const json& jb = blocks.at(i);
      auto& b = model_blocks[i];
      if (b.has_attention) {
        LoadedState ls = state_from_json_obj(jb.at("attn_norm"));
        b.attn_norm.state = std::move(ls.state);
        b.attn_norm.spec = ls.spec;
        b.attn.wq.p = linear_from_json(jb.at("wq"));
        b.attn.wk.p = linear_from_json(jb.at("wk"));
        b.attn.wv.p = linear_from_json(jb.at("wv"));
        b.attn.wo.p = linear_from_json(jb.at("wo"));
      }
      LoadedState ls = state_from_json_obj(jb.at("ffn_norm"));
      b.ffn_norm.state = std::move(ls.state);
      b.ffn_norm.spec = ls.spec;
      b.ff1.p = linear_from_json(jb.at("ff1"));
      b.ff2.p = linear_from_json(jb.at("ff2"));
    }
    if (j.contains("final_norm")) {
      LoadedState ls = state_from_json_obj(j.at("final_norm"));
      out.model.final_norm().state = std::move(ls.state);
      out.model.final_norm().spec = ls.spec;
    }
    out.model.readout().p = linear_from_json(j.at("readout"));
    if (out.config.norm.offline()) {
      bool trained = true;
      for (const auto* site : out.model.norm_sites()) {
        if (site->state.step == 0) trained = false;
      }
      if (trained) out.frozen = out.model.freeze();
    }
    return out;
  }

  // Fused file: only the frozen view is reconstructable.
  out.frozen.kind = out.config.kind;
  out.frozen.channels = out.config.channels;
  out.frozen.fused = true;
  out.frozen.per_token_readout =
      out.task_kind == harness::SyntheticTask::Kind::TokenCopyClassification;
  for (const auto& jb : blocks) {
    harness::FrozenBlock fb;
    fb.has_attention = jb.contains("wq");
    if (fb.has_attention) {
      fb.norm1 = frozen_norm_from_json(jb.at("attn_norm_frozen"));
      fb.wq = linear_from_json(jb.at("wq"));
      fb.wk = linear_from_json(jb.at("wk"));
      fb.wv = linear_from_json(jb.at("wv"));
      fb.wo = linear_from_json(jb.at("wo"));
    }
    fb.norm2 = frozen_norm_from_json(jb.at("ffn_norm_frozen"));
    fb.ff1 = linear_from_json(jb.at("ff1"));
    fb.ff2 = linear_from_json(jb.at("ff2"));
    out.frozen.blocks.push_back(std::move(fb));
  }
  if (j.contains("final_norm_frozen")) {
    out.frozen.has_final_norm = true;
    out.frozen.final_norm = frozen_norm_from_json(j.at("final_norm_frozen"));
  }
  out.frozen.readout = linear_from_json(j.at("readout"));
  return out;
}

RunConfig load_run_config(const std::string& path) {
  const json j = read_json_file(path);
  RunConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  if (j.contains("model")) {
    cfg.model = model_config_from_json(j.at("model"));
  }
  if (j.contains("norm")) {
    cfg.model.norm = spec_from_json(j.at("norm"));
  }
  if (j.contains("task")) {
    const json& jt = j.at("task");
    if (jt.contains("kind")) cfg.task.kind = task_from_tag(jt.at("kind").get<std::string>());
    cfg.task.batch = jt.value("batch", cfg.task.batch);
    cfg.task.tokens = jt.value("tokens", cfg.task.tokens);
    cfg.task.outlier_period = jt.value("outlier_period", cfg.task.outlier_period);
    cfg.task.outlier_magnitude = jt.value("outlier_magnitude", cfg.task.outlier_magnitude);
  }
  if (j.contains("train")) {
    const json& jt = j.at("train");
    cfg.train.steps = jt.value("steps", cfg.train.steps);
    cfg.train.lr = jt.value("lr", cfg.train.lr);
    cfg.train.trace_channels = jt.value("trace_channels", cfg.train.trace_channels);
    cfg.train.eval_batches = jt.value("eval_batches", cfg.train.eval_batches);
  }
  if (j.contains("sweep")) {
    const json& js = j.at("sweep");
    cfg.sweep_axis = js.value("axis", cfg.sweep_axis);
    if (js.contains("values")) cfg.sweep_values = js.at("values").get<std::vector<double>>();
    cfg.jobs = js.value("jobs", cfg.jobs);
  }
  if (j.contains("gradcheck")) {
    const json& jg = j.at("gradcheck");
    cfg.gradcheck_trials = jg.value("trials", cfg.gradcheck_trials);
    cfg.gradcheck_tol = jg.value("tol", cfg.gradcheck_tol);
  }
  if (j.contains("pnac")) {
    const json& jp = j.at("pnac");
    cfg.pnac_trace_path = jp.value("trace", cfg.pnac_trace_path);
    cfg.pnac_window = jp.value("window", cfg.pnac_window);
    cfg.pnac_which = jp.value("which", cfg.pnac_which);
  }
  if (j.contains("bench")) {
    cfg.bench_batches = j.at("bench").value("batches", cfg.bench_batches);
    cfg.bench_model = j.at("bench").value("model", cfg.bench_model);
  }

  // Keep the stimulus and model widths consistent.
  cfg.task.channels = cfg.model.channels;
  cfg.task.seed = cfg.seed;
  cfg.model.seed = cfg.seed;

  // Config-level invariants are stricter than the library's: epsilon must be
  // strictly positive in files.
  if (!(cfg.model.norm.epsilon > 0.0)) {
    throw std::runtime_error("config: norm.epsilon must be > 0");
  }
  cfg.model.norm.validate();
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j{{"version", kConfigVersion},
         {"seed", cfg.seed},
         {"out_dir", cfg.out_dir},
         {"model", model_config_to_json(cfg.model)},
         {"task",
          json{{"kind", task_tag(cfg.task.kind)},
               {"batch", cfg.task.batch},
               {"tokens", cfg.task.tokens},
               {"outlier_period", cfg.task.outlier_period},
               {"outlier_magnitude", cfg.task.outlier_magnitude}}},
         {"train",
          json{{"steps", cfg.train.steps},
               {"lr", cfg.train.lr},
               {"trace_channels", cfg.train.trace_channels},
               {"eval_batches", cfg.train.eval_batches}}},
         {"sweep",
          json{{"axis", cfg.sweep_axis}, {"values", cfg.sweep_values}, {"jobs", cfg.jobs}}},
         {"gradcheck", json{{"trials", cfg.gradcheck_trials}, {"tol", cfg.gradcheck_tol}}},
         {"pnac",
          json{{"trace", cfg.pnac_trace_path},
               {"window", cfg.pnac_window},
               {"which", cfg.pnac_which}}},
         {"bench", json{{"batches", cfg.bench_batches}, {"model", cfg.bench_model}}}};
  return j.dump(2);
}

}  // namespace unorm
