#include "pformer/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pformer/binary_io.hpp"
#include "pformer/checkpoint.hpp"
#include "pformer/dataset_io.hpp"
#include "pformer/errors.hpp"
#include "pformer/training.hpp"

namespace pformer::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string task_str(TaskId t) { return std::string(task_name(t)); }

class Incompatible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Accumulates what the manifest line reports about one run.
struct RunRecord {
  std::string subcommand;
  KvConfig config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  json extra = json::object();
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path resolve_out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return ".";
}

void append_manifest(const fs::path& dir, const RunRecord& rec, const std::string& started, double seconds,
                     int code, const std::string& message) {
  json j;
  j["subcommand"] = rec.subcommand;
  j["config"] = rec.config.values();
  j["seed"] = rec.seed;
  j["inputs"] = rec.inputs;
  j["outputs"] = rec.outputs;
  j["started_at"] = started;
  j["wall_seconds"] = seconds;
  j["version"] = kVersion;
  j["exit_code"] = code;
  if (!message.empty()) j["error"] = message;
  if (!rec.extra.empty()) j["details"] = rec.extra;
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream f(dir / "manifest.jsonl", std::ios::app);
  f << j.dump() << '\n';
}

std::string csv_matrix(const Mat& m) {
  std::ostringstream out;
  out.precision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << m(i, j);
    out << '\n';
  }
  return out.str();
}

std::string describe_scene(const std::string& task, const std::vector<Material>& materials) {
  std::map<Material, int> counts;
  for (Material m : materials) ++counts[m];
  std::ostringstream out;
  out << "task=" << task << ", particles=" << materials.size() << " (";
  bool first = true;
  for (const auto& [m, n] : counts) {
    out << (first ? "" : ", ") << material_name(m) << ' ' << n;
    first = false;
  }
  out << ')';
  return out.str();
}

void check_compatible(const Checkpoint& ckpt, const std::string& task, const std::vector<Material>& materials) {
  if (ckpt.meta.task != task || ckpt.meta.materials != materials) {
    throw Incompatible("checkpoint and data are incompatible:\n  checkpoint: " +
                       describe_scene(ckpt.meta.task, ckpt.meta.materials) +
                       "\n  data:       " + describe_scene(task, materials));
  }
}

KvConfig load_config(const std::string& path, RunRecord& rec) {
  if (path.empty()) return KvConfig::parse("", "<none>");
  rec.inputs["config"] = path;
  return KvConfig::load(path);
}

std::uint64_t pick_seed(const std::optional<std::uint64_t>& flag, KvConfig& kv) {
  if (flag) kv.set_number("seed", *flag);
  return static_cast<std::uint64_t>(kv.get_int("seed", 0));
}

std::vector<int> parse_horizons(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int h = 0;
    try {
      h = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw InvalidInput("--horizons: '" + item + "' is not an integer");
    }
    if (used != item.size() || h < 1) throw InvalidInput("--horizons: '" + item + "' is not a positive integer");
    out.push_back(h);
  }
  if (out.empty()) throw InvalidInput("--horizons: empty list");
  return out;
}

// ---- subcommands -----------------------------------------------------------

struct SimulateArgs {
  std::string config;
};

void cmd_simulate(const SimulateArgs& a, const std::optional<std::uint64_t>& seed_flag, const fs::path& dir,
                  RunRecord& rec, std::ostream& out) {
  KvConfig kv = load_config(a.config, rec);
  if (!kv.has("task")) throw InvalidInput(kv.source() + ": missing required key 'task'");
  const TaskSpec spec = TaskSpec::from_kv(kv);
  const long episodes = kv.get_int("episodes", 10);
  const long horizon = kv.get_int("horizon", 30);
  if (episodes < 1) throw InvalidInput("episodes must be at least 1");
  if (horizon < 1) throw InvalidInput("horizon must be at least 1");
  rec.seed = pick_seed(seed_flag, kv);

  KvConfig resolved = spec.to_kv();
  resolved.set_number("episodes", episodes);
  resolved.set_number("horizon", horizon);
  resolved.set_number("seed", rec.seed);
  rec.config = resolved;

  const Dataset ds = generate_dataset(spec, static_cast<int>(episodes), static_cast<int>(horizon), rec.seed);
  const std::string bytes = encode_dataset(ds);
  const fs::path path = dir / "dataset.bin";
  io::write_file_atomic(path, bytes);
  rec.outputs["dataset"] = path.string();
  rec.extra["digest"] = digest_hex(bytes);
  out << "wrote " << path.string() << " (" << episodes << " episodes, digest " << digest_hex(bytes) << ")\n";
}

struct TrainArgs {
  std::string config, dataset, resume;
};

void cmd_train(const TrainArgs& a, const std::optional<std::uint64_t>& seed_flag, const fs::path& dir,
               RunRecord& rec, std::ostream& out) {
  KvConfig kv = load_config(a.config, rec);
  rec.seed = pick_seed(seed_flag, kv);
  const std::string dataset_path = !a.dataset.empty() ? a.dataset : kv.get_string("dataset", "");
  if (dataset_path.empty()) throw InvalidInput("train: no dataset given (--dataset or 'dataset' key)");
  const TrainConfig tc = TrainConfig::from_kv(kv);
  tc.validate();
  const ModelConfig mc = model_config_from_kv(kv);
  mc.validate();

  KvConfig resolved = tc.to_kv();
  const KvConfig model_kv = model_config_to_kv(mc);
  for (const auto& [k, v] : model_kv.values()) resolved.set(k, v);
  resolved.set("dataset", dataset_path);
  rec.config = resolved;
  rec.inputs["dataset"] = dataset_path;

  const Dataset ds = load_dataset(dataset_path);
  if (ds.episodes.empty()) throw InvalidInput(dataset_path + ": dataset has no episodes");
  const std::string task = task_str(ds.spec.task);

  std::optional<Checkpoint> resume;
  TrainHooks hooks;
  if (!a.resume.empty()) {
    rec.inputs["resume"] = a.resume;
    resume = load_checkpoint(a.resume);
    check_compatible(*resume, task, ds.episodes.front().materials);
    hooks.resume = &*resume;
  }
  hooks.on_epoch = [&](int epoch, double loss) { out << "epoch " << epoch << " loss " << format_double(loss) << '\n'; };

  const TrainResult r = train(ds, mc, tc, hooks);

  Checkpoint ckpt;
  ckpt.params = r.params;
  ckpt.meta.task = task;
  ckpt.meta.materials = ds.episodes.front().materials;
  ckpt.training = r.state;
  const fs::path ckpt_path = dir / "checkpoint.bin";
  const fs::path curve_path = dir / "loss_curve.csv";
  const std::string ckpt_bytes = encode_checkpoint(ckpt);
  io::write_file_atomic(curve_path, loss_curve_csv(r.state.loss_curve));
  io::write_file_atomic(ckpt_path, ckpt_bytes);
  rec.outputs["checkpoint"] = ckpt_path.string();
  rec.outputs["loss_curve"] = curve_path.string();
  rec.extra["iterations"] = r.iterations;
  rec.extra["train_seconds"] = r.seconds;
  rec.extra["checkpoint_digest"] = digest_hex(ckpt_bytes);
  out << "wrote " << ckpt_path.string() << " after " << r.iterations << " iterations\n";
}

struct EvalArgs {
  std::string config, checkpoint, dataset, horizons = "1,5", predictor = "model";
  bool eval_split = false;
};

void cmd_eval(const EvalArgs& a, const std::optional<std::uint64_t>& seed_flag, const fs::path& dir,
              RunRecord& rec, std::ostream& out) {
  KvConfig kv = load_config(a.config, rec);
  rec.seed = pick_seed(seed_flag, kv);
  const std::vector<int> horizons = parse_horizons(a.horizons);
  if (a.dataset.empty()) throw InvalidInput("eval: --dataset is required");
  rec.inputs["dataset"] = a.dataset;
  const Dataset ds = load_dataset(a.dataset);
  if (ds.episodes.empty()) throw InvalidInput(a.dataset + ": dataset has no episodes");

  Predictor predictor;
  if (a.predictor == "model") {
    if (a.checkpoint.empty()) throw InvalidInput("eval: --checkpoint is required for the model predictor");
    rec.inputs["checkpoint"] = a.checkpoint;
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    for (const Episode& ep : ds.episodes) check_compatible(ckpt, task_str(ds.spec.task), ep.materials);
    predictor = model_predictor(ckpt.params);
  } else if (a.predictor == "oracle") {
    predictor = ground_truth_predictor();
  } else if (a.predictor == "persistence") {
    predictor = persistence_predictor();
  } else {
    throw InvalidInput("eval: unknown predictor '" + a.predictor + "' (model, oracle, persistence)");
  }

  std::vector<int> episodes;
  if (a.eval_split) {
    const double frac = kv.get_double("eval_fraction", 0.1);
    episodes = split_episodes(static_cast<int>(ds.episodes.size()), rec.seed, frac).eval;
  } else {
    for (int e = 0; e < static_cast<int>(ds.episodes.size()); ++e) episodes.push_back(e);
  }

  KvConfig resolved = kv;
  resolved.set("horizons", a.horizons);
  resolved.set("predictor", a.predictor);
  resolved.set("eval_split", a.eval_split ? "true" : "false");
  rec.config = resolved;

  const MetricsReport report = evaluate_predictor(predictor, ds, episodes, horizons);
  const fs::path path = dir / "metrics.csv";
  const std::string csv = report.to_csv();
  io::write_file_atomic(path, csv);
  rec.outputs["metrics"] = path.string();
  out << csv;
}

struct PlanArgs {
  std::string config, checkpoint, target;
  std::optional<std::uint64_t> scene_seed;
};

void cmd_plan(const PlanArgs& a, const std::optional<std::uint64_t>& seed_flag, const fs::path& dir,
              RunRecord& rec, std::ostream& out, bool& goal_reached) {
  KvConfig kv = load_config(a.config, rec);
  if (!kv.has("task")) throw InvalidInput(kv.source() + ": missing required key 'task'");
  rec.seed = pick_seed(seed_flag, kv);
  const TaskSpec spec = TaskSpec::from_kv(kv);
  const PlanConfig pc = plan_config_from_kv(kv, spec);
  pc.validate();
  const long max_steps = kv.get_int("max_steps", 30);
  if (max_steps < 0) throw InvalidInput("max_steps must be non-negative");
  const std::uint64_t scene_seed =
      a.scene_seed ? *a.scene_seed : static_cast<std::uint64_t>(kv.get_int("scene_seed", 0));
  const std::string model_kind = kv.get_string("model", a.checkpoint.empty() ? "simulator" : "learned");

  const SceneState start = create_scene(spec, scene_seed);
  Mat target;
  if (!a.target.empty()) {
    rec.inputs["target"] = a.target;
    target = parse_points_csv(io::read_file(a.target), a.target);
  } else if (spec.task == TaskId::kBoxPush) {
    target = box_push_target(start, kv.get_double("target_distance", 0.1), kv.get_double("target_rotation", 0.0));
  } else {
    throw InvalidInput("plan: --target is required for task " + task_str(spec.task));
  }
  const CostSpec cost = CostSpec::from_initial(PointSet(target), PointSet(start.objects), spec.workspace);

  std::unique_ptr<DynamicsModel> model;
  if (model_kind == "learned") {
    if (a.checkpoint.empty()) throw InvalidInput("plan: model = learned needs --checkpoint");
    rec.inputs["checkpoint"] = a.checkpoint;
    Checkpoint ckpt = load_checkpoint(a.checkpoint);
    check_compatible(ckpt, task_str(spec.task), start.particles().materials());
    model = std::make_unique<LearnedDynamics>(std::move(ckpt.params));
  } else if (model_kind == "simulator") {
    model = std::make_unique<SimulatorDynamics>(spec);
  } else if (model_kind == "persistence") {
    model = std::make_unique<PersistenceDynamics>();
  } else {
    throw InvalidInput("plan: unknown model '" + model_kind + "' (learned, simulator, persistence)");
  }

  KvConfig resolved = spec.to_kv();
  const KvConfig plan_kv = plan_config_to_kv(pc);
  for (const auto& [k, v] : plan_kv.values()) resolved.set(k, v);
  resolved.set_number("max_steps", max_steps);
  resolved.set_number("scene_seed", scene_seed);
  resolved.set_number("seed", rec.seed);
  resolved.set("model", model_kind);
  rec.config = resolved;

  const ClosedLoopResult res =
      closed_loop_control(start, spec, *model, cost, pc, static_cast<int>(max_steps), rec.seed);

  Dataset traj;
  traj.spec = spec;
  traj.episodes.push_back(record_episode(res.states));
  const fs::path traj_path = dir / "trajectory.bin";
  const fs::path log_path = dir / "plan_log.csv";
  io::write_file_atomic(log_path, control_log_csv(res));
  io::write_file_atomic(traj_path, encode_dataset(traj));
  rec.outputs["trajectory"] = traj_path.string();
  rec.outputs["plan_log"] = log_path.string();
  rec.extra["initial_goal"] = res.initial_goal;
  rec.extra["final_goal"] = res.final_goal;
  rec.extra["steps"] = res.log.size();
  rec.extra["success"] = res.success;
  rec.extra["normalized"] = res.normalized;
  rec.extra["rejections"] = res.rejections;
  goal_reached = res.success;
  out << "goal " << format_double(res.initial_goal) << " -> " << format_double(res.final_goal) << " in "
      << res.log.size() << " steps (" << (res.success ? "reached" : "not reached") << ")\n";
}

struct AttnArgs {
  std::string checkpoint, dataset;
  int episode = 0;
  int frame = -1;
};

void cmd_attn_export(const AttnArgs& a, const fs::path& dir, RunRecord& rec, std::ostream& out) {
  if (a.checkpoint.empty() || a.dataset.empty()) {
    throw InvalidInput("attn-export: --checkpoint and --dataset are required");
  }
  rec.inputs["checkpoint"] = a.checkpoint;
  rec.inputs["dataset"] = a.dataset;
  KvConfig resolved;
  resolved.set_number("episode", a.episode);
  resolved.set_number("frame", a.frame);
  rec.config = resolved;

  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.dataset);
  if (a.episode < 0 || a.episode >= static_cast<int>(ds.episodes.size())) {
    throw InvalidInput("attn-export: episode " + std::to_string(a.episode) + " out of range [0, " +
                       std::to_string(ds.episodes.size()) + ")");
  }
  const Episode& ep = ds.episodes[static_cast<std::size_t>(a.episode)];
  if (a.frame < 0 || a.frame >= ep.horizon()) {
    throw InvalidInput("attn-export: frame " + std::to_string(a.frame) + " out of range [0, " +
                       std::to_string(ep.horizon()) + ")");
  }
  check_compatible(ckpt, task_str(ds.spec.task), ep.materials);

  const ParticleSet state = ep.frame(a.frame);
  const TransitionResult tr = dynamics_transition(embed_particles(state, ckpt.params), ckpt.params, true);
  const std::vector<Eigen::Index> order = material_block_order(ep.materials);
  const auto n = static_cast<Eigen::Index>(order.size());

  fs::create_directories(dir);
  std::ostringstream order_csv;
  order_csv << "index,row,material\n";
  for (Eigen::Index i = 0; i < n; ++i) {
    order_csv << i << ',' << order[static_cast<std::size_t>(i)] << ','
              << material_name(ep.materials[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]) << '\n';
  }
  io::write_file_atomic(dir / "attn_order.csv", order_csv.str());
  rec.outputs["order"] = (dir / "attn_order.csv").string();

  std::ostringstream blocks;
  blocks.precision(17);
  blocks << "layer,head,from,to,mass\n";
  const AttentionMap& attn = *tr.attention;
  for (std::size_t l = 0; l < attn.size(); ++l) {
    for (std::size_t h = 0; h < attn[l].size(); ++h) {
      Mat m(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          m(i, j) = attn[l][h](order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
      }
      const std::string stem = "attn_layer" + std::to_string(l) + "_head" + std::to_string(h);
      io::write_file_atomic(dir / (stem + ".csv"), csv_matrix(m));
      io::write_file_atomic(dir / (stem + ".pgm"), encode_pgm(m));
      rec.outputs[stem] = (dir / (stem + ".csv")).string();

      std::map<Material, std::vector<Eigen::Index>> rows;
      for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(ep.materials.size()); ++i) {
        rows[ep.materials[static_cast<std::size_t>(i)]].push_back(i);
      }
      for (const auto& [from, fr] : rows) {
        for (const auto& [to, tc] : rows) {
          double mass = 0.0;
          for (Eigen::Index i : fr) {
            for (Eigen::Index j : tc) mass += attn[l][h](i, j);
          }
          blocks << l << ',' << h << ',' << material_name(from) << ',' << material_name(to) << ','
                 << mass / static_cast<double>(fr.size()) << '\n';
        }
      }
    }
  }
  io::write_file_atomic(dir / "attn_blocks.csv", blocks.str());
  rec.outputs["blocks"] = (dir / "attn_blocks.csv").string();
  out << "wrote attention maps for " << attn.size() << " layers to " << dir.string() << '\n';
}

}  // namespace

// ---- helpers -----------------------------------------------------------------

KvConfig model_config_to_kv(const ModelConfig& c) {
  KvConfig kv;
  kv.set_number("embed_dim", c.embed_dim);
  kv.set_number("num_layers", c.num_layers);
  kv.set_number("num_heads", c.num_heads);
  kv.set_number("ff_hidden", c.ff_hidden);
  kv.set_number("decoder_hidden", c.decoder_hidden);
  kv.set_number("position_scale", c.position_scale);
  kv.set_number("motion_scale", c.motion_scale);
  kv.set_number("output_scale", c.output_scale);
  kv.set("feed_back_object_motion", c.feed_back_object_motion ? "true" : "false");
  return kv;
}

ModelConfig model_config_from_kv(const KvConfig& kv) {
  ModelConfig c;
  c.embed_dim = static_cast<int>(kv.get_int("embed_dim", c.embed_dim));
  c.num_layers = static_cast<int>(kv.get_int("num_layers", c.num_layers));
  c.num_heads = static_cast<int>(kv.get_int("num_heads", c.num_heads));
  c.ff_hidden = static_cast<int>(kv.get_int("ff_hidden", c.ff_hidden));
  c.decoder_hidden = static_cast<int>(kv.get_int("decoder_hidden", c.decoder_hidden));
  c.position_scale = kv.get_double("position_scale", c.position_scale);
  c.motion_scale = kv.get_double("motion_scale", c.motion_scale);
  c.output_scale = kv.get_double("output_scale", c.output_scale);
  c.feed_back_object_motion = kv.get_bool("feed_back_object_motion", c.feed_back_object_motion);
  return c;
}

KvConfig plan_config_to_kv(const PlanConfig& c) {
  KvConfig kv;
  kv.set_number("plan_horizon", c.horizon);
  kv.set_number("samples", c.samples);
  kv.set_number("temperature", c.temperature);
  kv.set_number("noise_std", c.noise_std);
  kv.set_number("iterations", c.iterations);
  kv.set_number("terminal_weight", c.terminal_weight);
  kv.set_number("collision_penalty", c.collision_penalty);
  kv.set_number("infeasible_penalty", c.infeasible_penalty);
  kv.set_number("goal_threshold", c.goal_threshold);
  std::ostringstream lo, hi;
  for (std::size_t d = 0; d < 3; ++d) {
    lo << (d ? "," : "") << format_double(c.action_lower[d]);
    hi << (d ? "," : "") << format_double(c.action_upper[d]);
  }
  kv.set("action_lower", lo.str());
  kv.set("action_upper", hi.str());
  return kv;
}

PlanConfig plan_config_from_kv(const KvConfig& kv, const TaskSpec& spec) {
  PlanConfig c = PlanConfig::for_task(spec);
  c.horizon = static_cast<int>(kv.get_int("plan_horizon", c.horizon));
  c.samples = static_cast<int>(kv.get_int("samples", c.samples));
  c.temperature = kv.get_double("temperature", c.temperature);
  c.noise_std = kv.get_double("noise_std", c.noise_std);
  c.iterations = static_cast<int>(kv.get_int("iterations", c.iterations));
  c.terminal_weight = kv.get_double("terminal_weight", c.terminal_weight);
  c.collision_penalty = kv.get_double("collision_penalty", c.collision_penalty);
  c.infeasible_penalty = kv.get_double("infeasible_penalty", c.infeasible_penalty);
  c.goal_threshold = kv.get_double("goal_threshold", c.goal_threshold);
  for (const char* key : {"action_lower", "action_upper"}) {
    if (!kv.has(key)) continue;
    const std::vector<double> v = kv.get_doubles(key);
    if (v.size() != 3) throw InvalidInput(std::string(key) + ": expected three values");
    auto& dst = std::string(key) == "action_lower" ? c.action_lower : c.action_upper;
    std::copy(v.begin(), v.end(), dst.begin());
  }
  return c;
}

std::vector<Eigen::Index> material_block_order(const std::vector<Material>& materials) {
  std::vector<Eigen::Index> order(materials.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return materials[static_cast<std::size_t>(a)] < materials[static_cast<std::size_t>(b)];
  });
  return order;
}

std::string encode_pgm(const Mat& m) {
  std::string out = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(m(i, j), 0.0, 1.0)))));
    }
  }
  return out;
}

Mat decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  long w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5" || w < 0 || h < 0 || maxval != 255) throw FormatError("not an 8-bit P5 graymap");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() - offset != static_cast<std::size_t>(w * h)) throw FormatError("graymap size mismatch");
  Mat m(h, w);
  for (long i = 0; i < h * w; ++i) {
    m.data()[i] = static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)]) / 255.0;
  }
  return m;
}

Mat parse_points_csv(const std::string& text, const std::string& source) {
  std::vector<Vec3> pts;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p.x() >> p.y() >> p.z())) {
      if (pts.empty() && line_no == 1) continue;  // header
      throw InvalidInput(source + ":" + std::to_string(line_no) + ": expected x,y,z");
    }
    std::string rest;
    if (ls >> rest) throw InvalidInput(source + ":" + std::to_string(line_no) + ": more than three values");
    if (!p.allFinite()) throw InvalidInput(source + ":" + std::to_string(line_no) + ": non-finite coordinate");
    pts.push_back(p);
  }
  if (pts.empty()) throw InvalidInput(source + ": no points");
  Mat m(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return m;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Particle transformer world model: data, training, evaluation, planning"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  std::string out_flag;
  app.add_option("--seed", seed, "Override the configuration seed");
  app.add_option("--out", out_flag, std::string("Output directory (default $") + kOutDirEnv + " or .)");

  SimulateArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate", "Generate an episode dataset");
  sim_cmd->add_option("--config", sim.config, "Task configuration file")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
  train_cmd->add_option("--config", tr.config, "Training and model configuration file");
  train_cmd->add_option("--dataset", tr.dataset, "Dataset file (overrides the 'dataset' key)");
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint with training state");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate prediction metrics");
  eval_cmd->add_option("--config", ev.config, "Optional configuration (seed, eval_fraction)");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
  eval_cmd->add_option("--dataset", ev.dataset, "Dataset file")->required();
  eval_cmd->add_option("--horizons", ev.horizons, "Comma-separated rollout horizons")->capture_default_str();
  eval_cmd->add_option("--predictor", ev.predictor, "model, oracle or persistence")->capture_default_str();
  eval_cmd->add_flag("--eval-split", ev.eval_split, "Evaluate only the seeded held-out episodes");

  PlanArgs pl;
  auto* plan_cmd = app.add_subcommand("plan", "Closed-loop MPPI control toward a target point set");
  plan_cmd->add_option("--config", pl.config, "Task and planner configuration file")->required();
  plan_cmd->add_option("--checkpoint", pl.checkpoint, "Model checkpoint for model = learned");
  plan_cmd->add_option("--target", pl.target, "Target points as x,y,z CSV rows");
  plan_cmd->add_option("--scene-seed", pl.scene_seed, "Seed of the start scene");

  AttnArgs at;
  auto* attn_cmd = app.add_subcommand("attn-export", "Export attention maps of one frame");
  attn_cmd->add_option("--checkpoint", at.checkpoint, "Model checkpoint")->required();
  attn_cmd->add_option("--dataset", at.dataset, "Dataset file")->required();
  attn_cmd->add_option("--episode", at.episode, "Episode index")->capture_default_str();
  attn_cmd->add_option("--frame", at.frame, "Frame index")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const fs::path dir = resolve_out_dir(out_flag);
  RunRecord rec;
  rec.subcommand = app.get_subcommands().front()->get_name();
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  int code = kOk;
  std::string message;
  try {
    fs::create_directories(dir);
    if (sim_cmd->parsed()) {
      cmd_simulate(sim, seed, dir, rec, out);
    } else if (train_cmd->parsed()) {
      cmd_train(tr, seed, dir, rec, out);
    } else if (eval_cmd->parsed()) {
      cmd_eval(ev, seed, dir, rec, out);
    } else if (plan_cmd->parsed()) {
      bool reached = false;
      cmd_plan(pl, seed, dir, rec, out, reached);
      if (!reached) {
        code = kGoalNotReached;
        message = "goal threshold not reached";
      }
    } else if (attn_cmd->parsed()) {
      cmd_attn_export(at, dir, rec, out);
    }
  } catch (const TrainingDiverged& e) {
    code = kDiverged;
    message = e.what();
    rec.extra["diverged_iteration"] = e.iteration();
  } catch (const Incompatible& e) {
    code = kIncompatible;
    message = e.what();
  } catch (const FormatError& e) {
    code = kFormat;
    message = e.what();
  } catch (const IoError& e) {
    code = kIo;
    message = e.what();
  } catch (const fs::filesystem_error& e) {
    code = kIo;
    message = e.what();
  } catch (const std::invalid_argument& e) {
    code = kUsage;
    message = e.what();
  } catch (const std::exception& e) {
    code = kFailure;
    message = e.what();
  }
  if (!message.empty()) err << "error: " << message << '\n';
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    append_manifest(dir, rec, started, seconds, code, message);
  } catch (const std::exception&) {
  }
  return code;
}

}  // namespace pformer::cli
