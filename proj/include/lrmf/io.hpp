#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrmf/config.hpp"
#include "lrmf/dataset.hpp"
#include "lrmf/densities.hpp"
#include "lrmf/flows.hpp"
#include "lrmf/lrmf.hpp"

namespace lrmf {

// File formats: CSV datasets and traces, JSON checkpoints. Floats are written
// with 17 significant digits (CSV) or shortest-round-trip (JSON), so a
// write/read cycle reproduces every double bit for bit. All writes go through
// a temp file and a rename.

namespace detail {

inline void atomic_write(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no, const std::string& path) {
  if (s.empty()) {
    throw std::runtime_error(path + ": line " + std::to_string(line_no) + ": empty numeric field");
  }
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) {
    throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                             ": malformed number '" + s + "'");
  }
  return v;
}

}  // namespace detail

// ---- DatasetFile --------------------------------------------------------------

inline void save_dataset_csv(const Dataset& data, const std::string& path) {
  std::ostringstream out;
  const std::size_t d = data.dim();
  for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << "x" << j;
  if (data.has_labels()) out << ",label";
  out << "\n";
  for (std::size_t i = 0; i < data.n(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (j) out << ",";
      out << detail::fmt_double(data.x(i, j));
    }
    if (data.has_labels()) out << "," << data.labels[i];
    out << "\n";
  }
  detail::atomic_write(path, out.str());
}

inline Dataset load_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": line 1: missing header");
  const auto header = detail::split_csv_line(line);
  bool labeled = false;
  std::size_t d = header.size();
  if (!header.empty() && header.back() == "label") {
    labeled = true;
    d = header.size() - 1;
  }
  if (d == 0) throw std::runtime_error(path + ": line 1: no feature columns");
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "x" + std::to_string(j)) {
      throw std::runtime_error(path + ": line 1: expected column 'x" + std::to_string(j) +
                               "', got '" + header[j] + "'");
    }
  }

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1, rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.eof()) break;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      values.push_back(detail::parse_double(fields[j], line_no, path));
    }
    if (labeled) {
      labels.push_back(static_cast<int>(detail::parse_double(fields[d], line_no, path)));
    }
    ++rows;
  }
  if (rows == 0) throw std::runtime_error(path + ": line 2: no data rows");
  return Dataset(Tensor({rows, d}, std::move(values)), std::move(labels));
}

// ---- TraceFile ----------------------------------------------------------------

inline void save_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ostringstream out;
  out << "iter,minibatch_loss,full_loss,grad_norm_T,grad_norm_S\n";
  for (const TraceRow& r : trace) {
    out << r.iter << "," << detail::fmt_double(r.minibatch_loss) << ",";
    if (!std::isnan(r.full_loss)) out << detail::fmt_double(r.full_loss);
    out << "," << detail::fmt_double(r.grad_norm_t) << "," << detail::fmt_double(r.grad_norm_s)
        << "\n";
  }
  detail::atomic_write(path, out.str());
}

inline std::vector<TraceRow> load_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": line 1: missing header");
  if (!detail::split_csv_line(line).empty() &&
      line != "iter,minibatch_loss,full_loss,grad_norm_T,grad_norm_S") {
    throw std::runtime_error(path + ": line 1: unexpected trace header");
  }
  std::vector<TraceRow> rows;
  std::size_t line_no = 1;
  long prev_iter = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.eof()) break;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 5) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": expected 5 fields");
    }
    TraceRow r;
    r.iter = static_cast<long>(detail::parse_double(f[0], line_no, path));
    r.minibatch_loss = detail::parse_double(f[1], line_no, path);
    r.full_loss = f[2].empty() ? std::numeric_limits<double>::quiet_NaN()
                               : detail::parse_double(f[2], line_no, path);
    r.grad_norm_t = detail::parse_double(f[3], line_no, path);
    r.grad_norm_s = detail::parse_double(f[4], line_no, path);
    if (r.iter <= prev_iter) {
      throw std::runtime_error(path + ": line " + std::to_string(line_no) +
                               ": iterations must increase");
    }
    prev_iter = r.iter;
    rows.push_back(r);
  }
  return rows;
}

// ---- JSON pieces ----------------------------------------------------------------

using json = nlohmann::json;

inline json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", t.data()}};
}

inline Tensor tensor_from_json(const json& j) {
  std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  if (Tensor::numel(shape) != data.size()) {
    throw std::runtime_error("checkpoint: array length does not match its shape");
  }
  return Tensor(std::move(shape), std::move(data));
}

inline json flow_to_json(const FlowParams& p) {
  json j;
  if (const auto* a = std::get_if<AffineFlowParams>(&p.v)) {
    j["kind"] = "affine";
    j["form"] = a->form == AffineForm::kTriangular ? "triangular" : "posdef";
    j["lin_raw"] = tensor_to_json(a->lin_raw);
    j["bias"] = tensor_to_json(a->bias);
  } else {
    const auto& c = std::get<CouplingFlowParams>(p.v);
    j["kind"] = "coupling";
    j["s_max"] = c.s_max;
    j["activation"] = c.activation == Activation::kTanh ? "tanh" : "relu";
    json blocks = json::array();
    for (const auto& blk : c.blocks) {
      json nets;
      nets["mask"] = tensor_to_json(blk.mask);
      for (const auto& [name, net] : {std::pair{"s", &blk.s}, std::pair{"t", &blk.t}}) {
        nets[name] = json{{"w1", tensor_to_json(net->w1)}, {"b1", tensor_to_json(net->b1)},
                          {"w2", tensor_to_json(net->w2)}, {"b2", tensor_to_json(net->b2)},
                          {"w3", tensor_to_json(net->w3)}, {"b3", tensor_to_json(net->b3)}};
      }
      blocks.push_back(std::move(nets));
    }
    j["blocks"] = std::move(blocks);
  }
  return j;
}

inline FlowParams flow_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "affine") {
    AffineFlowParams a;
    a.form = j.at("form").get<std::string>() == "posdef" ? AffineForm::kPosDef
                                                         : AffineForm::kTriangular;
    a.lin_raw = tensor_from_json(j.at("lin_raw"));
    a.bias = tensor_from_json(j.at("bias"));
    return FlowParams{std::move(a)};
  }
  if (kind != "coupling") throw std::runtime_error("checkpoint: unknown flow kind " + kind);
  CouplingFlowParams c;
  c.s_max = j.at("s_max").get<double>();
  c.activation =
      j.at("activation").get<std::string>() == "relu" ? Activation::kRelu : Activation::kTanh;
  for (const json& bj : j.at("blocks")) {
    CouplingBlock blk;
    blk.mask = tensor_from_json(bj.at("mask"));
    auto net_from = [&](const json& nj) {
      CouplingNet n;
      n.w1 = tensor_from_json(nj.at("w1"));
      n.b1 = tensor_from_json(nj.at("b1"));
      n.w2 = tensor_from_json(nj.at("w2"));
      n.b2 = tensor_from_json(nj.at("b2"));
      n.w3 = tensor_from_json(nj.at("w3"));
      n.b3 = tensor_from_json(nj.at("b3"));
      return n;
    };
    blk.s = net_from(bj.at("s"));
    blk.t = net_from(bj.at("t"));
    c.blocks.push_back(std::move(blk));
  }
  return FlowParams{std::move(c)};
}

inline json density_to_json(const DensityParams& p) {
  json j;
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    j["family"] = "gaussian";
    j["mean"] = tensor_to_json(g->mean);
    j["scale_tril"] = tensor_to_json(g->scale_tril);
  } else if (const auto* m = std::get_if<Mixture2Params>(&p)) {
    j["family"] = "mixture2";
    j["mu1"] = m->mu1;
    j["mu2"] = m->mu2;
    j["var"] = m->var;
  } else {
    j["family"] = "flow";
    j["normalizer"] = flow_to_json(std::get<FlowDensityParams>(p).normalizer);
  }
  return j;
}

inline DensityParams density_from_json(const json& j) {
  const std::string fam = j.at("family").get<std::string>();
  if (fam == "gaussian") {
    GaussianParams g;
    g.mean = tensor_from_json(j.at("mean"));
    g.scale_tril = tensor_from_json(j.at("scale_tril"));
    return g;
  }
  if (fam == "mixture2") {
    return Mixture2Params{j.at("mu1").get<double>(), j.at("mu2").get<double>(),
                          j.at("var").get<double>()};
  }
  if (fam != "flow") throw std::runtime_error("checkpoint: unknown family " + fam);
  return FlowDensityParams{flow_from_json(j.at("normalizer"))};
}

inline json flowspec_to_json(const FlowSpec& s) {
  return json{{"kind", s.kind == FlowKind::kAffine ? "affine" : "coupling"},
              {"blocks", s.blocks},
              {"hidden", s.hidden},
              {"s_max", s.s_max},
              {"affine_form", s.affine_form == AffineForm::kPosDef ? "posdef" : "triangular"},
              {"activation", s.activation == Activation::kRelu ? "relu" : "tanh"}};
}

inline FlowSpec flowspec_from_json(const json& j, FlowSpec s = {}) {
  if (j.contains("kind")) {
    s.kind = j.at("kind").get<std::string>() == "coupling" ? FlowKind::kCoupling
                                                           : FlowKind::kAffine;
  }
  s.blocks = j.value("blocks", s.blocks);
  s.hidden = j.value("hidden", s.hidden);
  s.s_max = j.value("s_max", s.s_max);
  if (j.contains("affine_form")) {
    s.affine_form = j.at("affine_form").get<std::string>() == "posdef" ? AffineForm::kPosDef
                                                                       : AffineForm::kTriangular;
  }
  if (j.contains("activation")) {
    s.activation = j.at("activation").get<std::string>() == "relu" ? Activation::kRelu
                                                                   : Activation::kTanh;
  }
  return s;
}

inline json config_to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"grad_threshold", c.grad_threshold},
              {"loss_threshold", c.loss_threshold},
              {"batch_size", c.batch_size},
              {"max_iters", c.max_iters},
              {"private_max_iters", c.private_max_iters},
              {"seed", c.seed},
              {"full_eval_period", c.full_eval_period},
              {"warm_start_shared", c.warm_start_shared}};
}

inline TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.grad_threshold = j.value("grad_threshold", c.grad_threshold);
  c.loss_threshold = j.value("loss_threshold", c.loss_threshold);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.private_max_iters = j.value("private_max_iters", c.private_max_iters);
  c.seed = j.value("seed", c.seed);
  c.full_eval_period = j.value("full_eval_period", c.full_eval_period);
  c.warm_start_shared = j.value("warm_start_shared", c.warm_start_shared);
  return c;
}

// ---- Checkpoint -----------------------------------------------------------------

struct Checkpoint {
  std::string family;  // density family tag; "none" for flow-only checkpoints
  std::optional<FlowParams> transform;
  std::optional<DensityParams> shared;
  std::optional<double> c_ab;
  std::uint64_t seed = 0;
  TrainConfig config;
  FlowSpec density_flow;  // architecture echo for refits during eval
};

constexpr int kCheckpointSchema = 1;

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json j;
  j["schema_version"] = kCheckpointSchema;
  j["family"] = ck.family;
  j["flow"] = ck.transform ? json(ck.transform->is_affine() ? "affine" : "coupling")
                           : json(nullptr);
  j["transform"] = ck.transform ? flow_to_json(*ck.transform) : json(nullptr);
  j["shared"] = ck.shared ? density_to_json(*ck.shared) : json(nullptr);
  j["c_ab"] = ck.c_ab ? json(*ck.c_ab) : json(nullptr);
  j["seed"] = ck.seed;
  j["config"] = config_to_json(ck.config);
  j["density_flow"] = flowspec_to_json(ck.density_flow);
  detail::atomic_write(path, j.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  const int version = j.at("schema_version").get<int>();
  if (version != kCheckpointSchema) {
    throw std::runtime_error(path + ": unknown schema_version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.family = j.at("family").get<std::string>();
  if (!j.at("transform").is_null()) ck.transform = flow_from_json(j.at("transform"));
  if (!j.at("shared").is_null()) ck.shared = density_from_json(j.at("shared"));
  if (!j.at("c_ab").is_null()) ck.c_ab = j.at("c_ab").get<double>();
  ck.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("config")) ck.config = config_from_json(j.at("config"));
  if (j.contains("density_flow")) ck.density_flow = flowspec_from_json(j.at("density_flow"));
  return ck;
}

}  // namespace lrmf
