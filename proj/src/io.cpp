#include "geodistill/io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "geodistill/errors.hpp"

namespace geodistill::io {

namespace {

constexpr const char* kCheckpointFormat = "geodistill-checkpoint/1";
constexpr const char* kSceneFormat = "geodistill-scene/1";

Json vector3_to_json(const Eigen::Vector3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

Json pose_to_json(const scene::CameraPose& p) {
  return {{"rotation", matrix_to_json(p.rotation)},
          {"translation", vector3_to_json(p.translation)},
          {"focal", p.focal},
          {"principal_point", Json::array({p.principal_point.x(), p.principal_point.y()})}};
}

scene::CameraPose pose_from_json(const Json& j) {
  scene::CameraPose p;
  const Eigen::MatrixXd r = matrix_from_json(j.at("rotation"));
  if (r.rows() != 3 || r.cols() != 3) throw ParseError("camera rotation must be 3 x 3", 0);
  p.rotation = r;
  const auto t = j.at("translation").get<std::vector<double>>();
  const auto pp = j.at("principal_point").get<std::vector<double>>();
  if (t.size() != 3 || pp.size() != 2) throw ParseError("malformed camera pose", 0);
  p.translation = Eigen::Vector3d(t[0], t[1], t[2]);
  p.focal = j.at("focal").get<double>();
  p.principal_point = Eigen::Vector2d(pp[0], pp[1]);
  return p;
}

Json bools_to_json(const std::vector<bool>& v) {
  Json a = Json::array();
  for (bool b : v) a.push_back(b);
  return a;
}

std::vector<bool> bools_from_json(const Json& j) {
  std::vector<bool> v;
  for (const Json& e : j) v.push_back(e.get<bool>());
  return v;
}

Json view_to_json(const scene::ViewBundle& v) {
  return {{"grid", {{"rows", v.grid.rows}, {"cols", v.grid.cols}, {"height", v.grid.height}, {"width", v.grid.width}}},
          {"descriptors", matrix_to_json(v.descriptors)},
          {"depth", matrix_to_json(v.depth)},
          {"visible", bools_to_json(v.visible)},
          {"patch_centers", matrix_to_json(v.patch_centers)},
          {"point_id", v.point_id},
          {"point_pixels", matrix_to_json(v.point_pixels)},
          {"point_depth", matrix_to_json(v.point_depth)},
          {"point_patch", v.point_patch}};
}

scene::ViewBundle view_from_json(const Json& j) {
  scene::ViewBundle v;
  const Json& g = j.at("grid");
  v.grid = {g.at("rows").get<int>(), g.at("cols").get<int>(), g.at("height").get<int>(), g.at("width").get<int>()};
  v.descriptors = matrix_from_json(j.at("descriptors"));
  v.depth = matrix_from_json(j.at("depth"));
  v.visible = bools_from_json(j.at("visible"));
  v.patch_centers = matrix_from_json(j.at("patch_centers"));
  v.point_id = j.at("point_id").get<std::vector<int>>();
  v.point_pixels = matrix_from_json(j.at("point_pixels"));
  v.point_depth = matrix_from_json(j.at("point_depth"));
  v.point_patch = j.at("point_patch").get<std::vector<int>>();

  const auto n = static_cast<std::size_t>(v.grid.size());
  if (static_cast<std::size_t>(v.descriptors.rows()) != n || static_cast<std::size_t>(v.depth.size()) != n ||
      v.visible.size() != n || static_cast<std::size_t>(v.patch_centers.rows()) != n || v.point_id.size() != n) {
    throw ParseError("view arrays disagree with the patch grid", 0);
  }
  if (v.point_pixels.rows() != v.point_depth.size() ||
      static_cast<std::size_t>(v.point_depth.size()) != v.point_patch.size()) {
    throw ParseError("view point arrays disagree in length", 0);
  }
  return v;
}

Json optim_to_json(const trainer::OptimState& s) {
  Json m = Json::array();
  Json v = Json::array();
  for (const auto& x : s.m) m.push_back(matrix_to_json(x));
  for (const auto& x : s.v) v.push_back(matrix_to_json(x));
  return {{"t", s.t}, {"m", m}, {"v", v}};
}

trainer::OptimState optim_from_json(const Json& j) {
  trainer::OptimState s;
  s.t = j.at("t").get<long>();
  for (const Json& x : j.at("m")) s.m.push_back(matrix_from_json(x));
  for (const Json& x : j.at("v")) s.v.push_back(matrix_from_json(x));
  if (s.m.size() != s.v.size()) throw ParseError("optimizer moments disagree in length", 0);
  return s;
}

Json progress_to_json(const trainer::TrainState& s) {
  return {{"params", parameters_to_json(s.params)},
          {"step", s.step},
          {"epoch", s.epoch},
          {"cursor", s.cursor},
          {"order", s.order},
          {"rng_state", s.rng_state},
          {"validation_seed", s.validation_seed},
          {"best_validation", std::isfinite(s.best_validation) ? Json(s.best_validation) : Json(nullptr)},
          {"best_epoch", s.best_epoch},
          {"best_params", parameters_to_json(s.best_params)},
          {"epochs_without_improvement", s.epochs_without_improvement},
          {"epoch_loss_sum", s.epoch_loss_sum},
          {"finished", s.finished},
          {"stopped_early", s.stopped_early}};
}

trainer::TrainState progress_from_json(const Json& j, const Json& optimizer) {
  trainer::TrainState s;
  s.params = parameters_from_json(j.at("params"));
  s.optim = optim_from_json(optimizer);
  s.step = j.at("step").get<long>();
  s.epoch = j.at("epoch").get<int>();
  s.cursor = j.at("cursor").get<int>();
  s.order = j.at("order").get<std::vector<int>>();
  s.rng_state = j.at("rng_state").get<std::string>();
  s.validation_seed = j.at("validation_seed").get<std::uint64_t>();
  const Json& best = j.at("best_validation");
  s.best_validation = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
  s.best_epoch = j.at("best_epoch").get<int>();
  s.best_params = parameters_from_json(j.at("best_params"));
  s.epochs_without_improvement = j.at("epochs_without_improvement").get<int>();
  s.epoch_loss_sum = j.at("epoch_loss_sum").get<double>();
  s.finished = j.at("finished").get<bool>();
  s.stopped_early = j.at("stopped_early").get<bool>();
  return s;
}

template <typename F>
auto schema_guard(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string(what) + ": " + ex.what(), 0);
  }
}

}  // namespace

Json matrix_to_json(const Eigen::MatrixXd& m) {
  Json data = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  return {{"shape", Json::array({m.rows(), m.cols()})}, {"data", std::move(data)}};
}

Eigen::MatrixXd matrix_from_json(const Json& j) {
  const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
  if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw ParseError("matrix shape must be [rows, cols]", 0);
  const Json& data = j.at("data");
  if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != shape[0] * shape[1]) {
    throw ParseError("matrix data length does not match its shape", 0);
  }
  Eigen::MatrixXd m(shape[0], shape[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < shape[0]; ++r) {
    for (Eigen::Index c = 0; c < shape[1]; ++c) m(r, c) = data[k++].get<double>();
  }
  return m;
}

Json scene_to_json(const scene::SceneSample& sample) {
  const scene::Scene& s = sample.scene;
  config::RunConfig holder;
  holder.scene = s.config;
  return {{"format", kSceneFormat},
          {"config", config::to_json(holder)["scene"]},
          {"points", matrix_to_json(s.points)},
          {"base_descriptors", matrix_to_json(s.base_descriptors)},
          {"poses", Json::array({pose_to_json(s.poses[0]), pose_to_json(s.poses[1])})},
          {"views", Json::array({view_to_json(sample.views[0]), view_to_json(sample.views[1])})}};
}

scene::SceneSample scene_from_json(const Json& j) {
  return schema_guard("invalid scene file", [&] {
    if (j.at("format").get<std::string>() != kSceneFormat) throw ParseError("unsupported scene format", 0);
    scene::SceneSample out;
    try {
      out.scene.config = config::from_json({{"scene", j.at("config")}}).scene;
    } catch (const ConfigError& e) {
      throw ParseError(std::string("invalid scene config: ") + e.what(), 0);
    }
    out.scene.points = matrix_from_json(j.at("points"));
    out.scene.base_descriptors = matrix_from_json(j.at("base_descriptors"));
    const Json& poses = j.at("poses");
    const Json& views = j.at("views");
    if (poses.size() != 2 || views.size() != 2) throw ParseError("a scene has exactly two poses and views", 0);
    for (std::size_t v = 0; v < 2; ++v) {
      out.scene.poses[v] = pose_from_json(poses[v]);
      out.views[v] = view_from_json(views[v]);
    }
    return out;
  });
}

Json parameters_to_json(const model::TrainableParameters& p) {
  Json layers = Json::array();
  for (const model::LoraLayer& l : p.adapter.layers) {
    layers.push_back({{"layer", l.layer}, {"A", matrix_to_json(l.A)}, {"B", matrix_to_json(l.B)}});
  }
  return {{"adapter", {{"rank", p.adapter.rank}, {"alpha", p.adapter.alpha}, {"layers", layers}}},
          {"heads",
           {{"depth_rank", {{"projection", matrix_to_json(p.rank_head.projection)},
                            {"weight", matrix_to_json(p.rank_head.weight)}}},
            {"inter_view_delta", {{"hidden_weight", matrix_to_json(p.delta_head.hidden_weight)},
                                  {"hidden_bias", matrix_to_json(p.delta_head.hidden_bias)},
                                  {"out_weight", matrix_to_json(p.delta_head.out_weight)},
                                  {"out_bias", matrix_to_json(p.delta_head.out_bias)}}},
            {"abs_depth", {{"weight", matrix_to_json(p.abs_head.weight)}, {"bias", matrix_to_json(p.abs_head.bias)}}}}}};
}

model::TrainableParameters parameters_from_json(const Json& j) {
  model::TrainableParameters p;
  const Json& a = j.at("adapter");
  p.adapter.rank = a.at("rank").get<int>();
  p.adapter.alpha = a.at("alpha").get<double>();
  for (const Json& l : a.at("layers")) {
    p.adapter.layers.push_back({l.at("layer").get<int>(), matrix_from_json(l.at("A")), matrix_from_json(l.at("B"))});
  }
  const Json& h = j.at("heads");
  p.rank_head.projection = matrix_from_json(h.at("depth_rank").at("projection"));
  p.rank_head.weight = matrix_from_json(h.at("depth_rank").at("weight"));
  const Json& d = h.at("inter_view_delta");
  p.delta_head.hidden_weight = matrix_from_json(d.at("hidden_weight"));
  p.delta_head.hidden_bias = matrix_from_json(d.at("hidden_bias"));
  p.delta_head.out_weight = matrix_from_json(d.at("out_weight"));
  p.delta_head.out_bias = matrix_from_json(d.at("out_bias"));
  p.abs_head.weight = matrix_from_json(h.at("abs_depth").at("weight"));
  p.abs_head.bias = matrix_from_json(h.at("abs_depth").at("bias"));
  return p;
}

Json checkpoint_to_json(const Checkpoint& c) {
  Json j = parameters_to_json(c.params);
  j["format"] = kCheckpointFormat;
  j["config"] = config::to_json(c.config);
  if (c.state) {
    j["optimizer"] = optim_to_json(c.state->optim);
    j["progress"] = progress_to_json(*c.state);
  }
  return j;
}

Checkpoint checkpoint_from_json(const Json& j) {
  return schema_guard("invalid checkpoint", [&] {
    if (!j.is_object() || j.value("format", "") != kCheckpointFormat) throw ParseError("unsupported checkpoint format", 0);
    Checkpoint c;
    try {
      c.config = config::from_json(j.at("config"));
    } catch (const ConfigError& e) {
      throw ParseError(std::string("invalid checkpoint config: ") + e.what(), 0);
    }
    c.params = parameters_from_json(j);
    if (j.contains("progress") != j.contains("optimizer")) {
      throw ParseError("checkpoint progress and optimizer state must appear together", 0);
    }
    if (j.contains("progress")) c.state = progress_from_json(j.at("progress"), j.at("optimizer"));
    return c;
  });
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << contents;
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), e.byte);
  }
}

Json read_json(const std::filesystem::path& path) { return parse_json(read_file(path)); }

void write_json(const std::filesystem::path& path, const Json& j) { write_file(path, j.dump(1) + "\n"); }

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_json(path, checkpoint_to_json(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json(path)); }

void load_checkpoint_into(const std::filesystem::path& path, Checkpoint& target) {
  Checkpoint loaded = load_checkpoint(path);
  target = std::move(loaded);
}

void save_scene(const scene::SceneSample& sample, const std::filesystem::path& path) {
  write_json(path, scene_to_json(sample));
}

scene::SceneSample load_scene(const std::filesystem::path& path) { return scene_from_json(read_json(path)); }

}  // namespace geodistill::io
