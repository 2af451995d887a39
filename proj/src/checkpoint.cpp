#include "monoflow/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace monoflow {

using nlohmann::json;

namespace {

json mat_to_json(const Mat& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) a.push_back(m(i, j));
  return json{{"shape", {m.rows(), m.cols()}}, {"data", std::move(a)}};
}

Mat mat_from_json(const json& j, const std::string& what) {
  auto shape = j.at("shape");
  Eigen::Index r = shape.at(0).get<Eigen::Index>();
  Eigen::Index c = shape.at(1).get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != r * c)
    throw std::runtime_error("checkpoint: bad tensor size for " + what);
  Mat m(r, c);
  size_t k = 0;
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index jj = 0; jj < c; ++jj) m(i, jj) = data.at(k++).get<double>();
  return m;
}

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vec_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j.at(static_cast<size_t>(i)).get<double>();
  return v;
}

json spectral_state(const SpectralLinear& l) {
  return json{{"u", vec_to_json(l.u)}, {"v", vec_to_json(l.v)}, {"sigma", l.sigma_est}};
}

void restore_spectral(SpectralLinear& l, const json& j) {
  l.u = vec_from_json(j.at("u"));
  l.v = vec_from_json(j.at("v"));
  l.sigma_est = j.at("sigma").get<double>();
}

}  // namespace

json model_to_json(FlowModel& m, const json& extra) {
  json blocks = json::array();
  json spectral = json::object();
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    FlowBlock& b = m.blocks[i];
    json e;
    e["kind"] = block_kind_to_string(b.kind);
    if (b.kind == BlockKind::ActNorm) {
      e["ready"] = b.actnorm_ready;
    } else {
      const GNetConfig& c = b.g->cfg;
      e["gnet"] = json{{"dim", c.dim},
                       {"depth", c.depth},
                       {"growth", c.growth},
                       {"activation", activation_to_string(c.act)},
                       {"kernel_lip", c.kernel_lip},
                       {"coeff_lip", c.coeff_lip},
                       {"learnable_concat", c.learnable_concat},
                       {"pila_k", c.pila_k}};
      std::string prefix = "block" + std::to_string(i) + ".g.";
      for (size_t s = 0; s < b.g->steps.size(); ++s)
        spectral[prefix + "step" + std::to_string(s)] = spectral_state(b.g->steps[s]);
      spectral[prefix + "final"] = spectral_state(b.g->final_layer);
    }
    blocks.push_back(std::move(e));
  }
  json params = json::array();
  ParamRefs refs = model_params(m);
  for (size_t i = 0; i < refs.names.size(); ++i) {
    json p = mat_to_json(*refs.tensors[i]);
    p["name"] = refs.names[i];
    params.push_back(std::move(p));
  }
  return json{{"magic", "monoflow"}, {"version", 1},
              {"config", json{{"dim", m.dim}, {"blocks", std::move(blocks)}}},
              {"params", std::move(params)},
              {"spectral", std::move(spectral)},
              {"extra", extra}};
}

FlowModel model_from_json(const json& j, json* extra_out) {
  if (!j.contains("magic") || j.at("magic") != "monoflow")
    throw std::runtime_error("checkpoint: bad magic");
  int version = j.at("version").get<int>();
  if (version > 1)
    throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                             " is newer than supported (1)");
  FlowModel m;
  const json& cfg = j.at("config");
  m.dim = cfg.at("dim").get<int>();
  Rng dummy(0);
  for (const auto& e : cfg.at("blocks")) {
    BlockKind kind = block_kind_from_string(e.at("kind").get<std::string>());
    if (kind == BlockKind::ActNorm) {
      FlowBlock b = make_actnorm(m.dim);
      b.actnorm_ready = e.value("ready", false);
      m.blocks.push_back(std::move(b));
    } else {
      const json& g = e.at("gnet");
      GNetConfig gc;
      gc.dim = g.at("dim").get<int>();
      gc.depth = g.at("depth").get<int>();
      gc.growth = g.at("growth").get<int>();
      gc.act = activation_from_string(g.at("activation").get<std::string>());
      gc.kernel_lip = g.at("kernel_lip").get<double>();
      gc.coeff_lip = g.at("coeff_lip").get<double>();
      gc.learnable_concat = g.at("learnable_concat").get<bool>();
      gc.pila_k = g.at("pila_k").get<double>();
      m.blocks.push_back(make_gblock(kind, gc, dummy));
    }
  }
  ParamRefs refs = model_params(m);
  for (const auto& p : j.at("params")) {
    std::string name = p.at("name").get<std::string>();
    bool found = false;
    for (size_t i = 0; i < refs.names.size(); ++i) {
      if (refs.names[i] == name) {
        Mat v = mat_from_json(p, name);
        if (v.rows() != refs.tensors[i]->rows() || v.cols() != refs.tensors[i]->cols())
          throw std::runtime_error("checkpoint: shape mismatch for " + name);
        *refs.tensors[i] = std::move(v);
        found = true;
        break;
      }
    }
    if (!found) throw std::runtime_error("checkpoint: unknown parameter " + name);
  }
  if (j.contains("spectral")) {
    for (auto it = j.at("spectral").begin(); it != j.at("spectral").end(); ++it) {
      // keys look like "blockN.g.stepM" or "blockN.g.final"
      const std::string& key = it.key();
      size_t bpos = key.find('.');
      if (bpos == std::string::npos || key.rfind("block", 0) != 0)
        throw std::runtime_error("checkpoint: bad spectral key " + key);
      size_t bi = static_cast<size_t>(std::stoul(key.substr(5, bpos - 5)));
      if (bi >= m.blocks.size() || !m.blocks[bi].g)
        throw std::runtime_error("checkpoint: spectral key for missing block: " + key);
      GNetwork& g = *m.blocks[bi].g;
      std::string rest = key.substr(bpos + 1);
      if (rest.rfind("g.", 0) != 0)
        throw std::runtime_error("checkpoint: bad spectral key " + key);
      rest = rest.substr(2);
      if (rest == "final") {
        restore_spectral(g.final_layer, it.value());
      } else if (rest.rfind("step", 0) == 0) {
        size_t si = static_cast<size_t>(std::stoul(rest.substr(4)));
        if (si >= g.steps.size())
          throw std::runtime_error("checkpoint: spectral key out of range: " + key);
        restore_spectral(g.steps[si], it.value());
      } else {
        throw std::runtime_error("checkpoint: bad spectral key " + key);
      }
    }
  }
  for (auto& b : m.blocks)
    if (b.g) b.g->touch();
  if (extra_out) *extra_out = j.value("extra", json::object());
  return m;
}

void save_checkpoint(const std::string& path, FlowModel& m, const json& extra) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << model_to_json(m, extra).dump();
  out << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

FlowModel load_checkpoint(const std::string& path, json* extra_out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
  return model_from_json(j, extra_out);
}

}  // namespace monoflow
