#include "pformer/simulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "pformer/errors.hpp"

namespace pformer {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kMaxSolverIterations = 2000;
constexpr double kLinkTolerance = 1e-7;   // relative strain at which projection stops
constexpr double kContactTolerance = 1e-10;
constexpr double kPusherHeight = 0.02;    // z of planar pusher points
constexpr double kCapsuleRadius = 0.005;  // flat pusher half thickness
constexpr double kSag = 0.01;             // gravity proxy drop per step

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
double normal(Rng& rng, double sigma) { return std::normal_distribution<double>(0.0, sigma)(rng); }

Eigen::Vector2d xy(const Eigen::Ref<const Eigen::RowVector3d>& p) { return {p(0), p(1)}; }

bool inside_xy(const Workspace& ws, double x, double y, double margin) {
  return x >= ws.x_min + margin && x <= ws.x_max - margin && y >= ws.y_min + margin && y <= ws.y_max - margin;
}

// Farthest-point sampling starting from row 0.
Mat farthest_point_sample(const Mat& dense, int count) {
  const Eigen::Index n = dense.rows();
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Mat out(count, 3);
  Eigen::Index pick = 0;
  for (int k = 0; k < count; ++k) {
    out.row(k) = dense.row(pick);
    Eigen::Index next = 0;
    double far = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (dense.row(i) - dense.row(pick)).squaredNorm();
      auto& b = best[static_cast<std::size_t>(i)];
      b = std::min(b, d);
      if (b > far) {
        far = b;
        next = i;
      }
    }
    pick = next;
  }
  return out;
}

Mat box_surface(double hx, double hy, double h, double spacing) {
  std::vector<Vec3> pts;
  auto steps = [&](double extent) { return std::max(1, static_cast<int>(std::round(extent / spacing))); };
  const int nx = steps(2 * hx), ny = steps(2 * hy), nz = steps(h);
  for (int i = 0; i <= nx; ++i) {
    for (int j = 0; j <= ny; ++j) {
      const double x = -hx + 2 * hx * i / nx, y = -hy + 2 * hy * j / ny;
      pts.emplace_back(x, y, 0.0);
      pts.emplace_back(x, y, h);
    }
  }
  for (int k = 1; k < nz; ++k) {
    const double z = h * k / nz;
    for (int i = 0; i <= nx; ++i) {
      const double x = -hx + 2 * hx * i / nx;
      pts.emplace_back(x, -hy, z);
      pts.emplace_back(x, hy, z);
    }
    for (int j = 1; j < ny; ++j) {
      const double y = -hy + 2 * hy * j / ny;
      pts.emplace_back(-hx, y, z);
      pts.emplace_back(hx, y, z);
    }
  }
  Mat out(static_cast<Eigen::Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  return out;
}

void place_rigid(SceneState& s) {
  const RigidBody& b = *s.body;
  const double c = std::cos(b.theta), sn = std::sin(b.theta);
  for (Eigen::Index i = 0; i < b.body_points.rows(); ++i) {
    const double bx = b.body_points(i, 0), by = b.body_points(i, 1);
    s.objects(s.rigid.begin + i, 0) = b.x + c * bx - sn * by;
    s.objects(s.rigid.begin + i, 1) = b.y + sn * bx + c * by;
    s.objects(s.rigid.begin + i, 2) = b.body_points(i, 2);
  }
}

// Effector point offsets relative to the group anchor.
Mat cylinder_offsets(int points, double radius) {
  Mat out(points, 3);
  for (int k = 0; k < points; ++k) {
    const double a = 2 * kPi * k / points;
    out.row(k) << radius * std::cos(a), radius * std::sin(a), 0.0;
  }
  return out;
}

Mat segment_offsets(int points, double length, double angle) {
  Mat out(points, 3);
  for (int k = 0; k < points; ++k) {
    const double u = points == 1 ? 0.0 : (static_cast<double>(k) / (points - 1) - 0.5) * length;
    out.row(k) << u * std::cos(angle), u * std::sin(angle), 0.0;
  }
  return out;
}

Mat gripper_offsets(int points, double width) {
  Mat out(points, 3);
  const int per_finger = (points + 1) / 2;
  for (int k = 0; k < points; ++k) {
    const int finger = k < per_finger ? -1 : 1;
    const int idx = k < per_finger ? k : k - per_finger;
    const int count = k < per_finger ? per_finger : points - per_finger;
    out.row(k) << (idx - 0.5 * (count - 1)) * 0.004, finger * 0.5 * width, 0.0;
  }
  return out;
}

void set_effectors(SceneState& s, const std::vector<Vec3>& anchors, const std::vector<Mat>& offsets) {
  int total = 0;
  for (const Mat& o : offsets) total += static_cast<int>(o.rows());
  s.anchors = anchors;
  s.effector.resize(total, 3);
  s.effector_group.clear();
  int row = 0;
  for (std::size_t g = 0; g < anchors.size(); ++g) {
    for (Eigen::Index k = 0; k < offsets[g].rows(); ++k) {
      s.effector.row(row++) = anchors[g].transpose() + offsets[g].row(k);
      s.effector_group.push_back(static_cast<int>(g));
    }
  }
  s.last_motion = Mat::Zero(total, 3);
}

std::vector<Mat> split_offsets(const TaskSpec& spec, const std::function<Mat(int)>& make) {
  const int groups = spec.effector_groups();
  std::vector<Mat> out;
  for (int g = 0; g < groups; ++g) {
    const int points = spec.effector_points / groups + (g < spec.effector_points % groups ? 1 : 0);
    out.push_back(make(points));
  }
  return out;
}

void allocate_objects(SceneState& s, const TaskSpec& spec) {
  int next = 0;
  auto take = [&](IndexRange& r, int count, Material m) {
    r = {next, count};
    next += count;
    for (int i = 0; i < count; ++i) s.object_materials.push_back(m);
  };
  take(s.rigid, spec.rigid_count, Material::kRigid);
  take(s.rope, spec.rope_count, Material::kRope);
  take(s.cloth, spec.cloth_side * spec.cloth_side, Material::kCloth);
  take(s.granular, spec.granular_count, Material::kGranular);
  s.objects = Mat::Zero(next, 3);
}

// Random smooth planar chain that stays inside the workspace.
bool place_chain(Rng& rng, SceneState& s, const TaskSpec& spec, const Eigen::Vector2d& start, double heading,
                 double turn_sigma) {
  const double margin = 0.03;
  const Workspace& ws = spec.workspace;
  const Eigen::Vector2d center(0.5 * (ws.x_min + ws.x_max), 0.5 * (ws.y_min + ws.y_max));
  Eigen::Vector2d p = start;
  for (int i = 0; i < s.rope.count; ++i) {
    if (i > 0) {
      heading += normal(rng, turn_sigma);
      Eigen::Vector2d q = p + spec.rope_segment * Eigen::Vector2d(std::cos(heading), std::sin(heading));
      if (!inside_xy(ws, q.x(), q.y(), margin)) {
        const Eigen::Vector2d to_c = center - p;
        heading = std::atan2(to_c.y(), to_c.x()) + normal(rng, 0.2);
        q = p + spec.rope_segment * Eigen::Vector2d(std::cos(heading), std::sin(heading));
      }
      if (!inside_xy(ws, q.x(), q.y(), margin)) return false;
      p = q;
    }
    s.objects.row(s.rope.begin + i) << p.x(), p.y(), spec.rope_radius;
  }
  for (int i = 0; i + 1 < s.rope.count; ++i) {
    s.rope_links.push_back({s.rope.begin + i, s.rope.begin + i + 1, spec.rope_segment});
  }
  return true;
}

double disk_gap(const SceneState& s, int i, const Eigen::Vector3d& p) {
  return (s.objects.row(i).transpose() - p).head<2>().norm();
}

// Rejection-samples non-overlapping disks around the given centers.
void place_disks(Rng& rng, SceneState& s, const TaskSpec& spec, const std::vector<Eigen::Vector2d>& centers,
                 double spread, const std::function<bool(const Eigen::Vector2d&)>& allowed) {
  const double r = spec.granular_radius;
  const Workspace& ws = spec.workspace;
  long attempts = 0;
  for (int i = 0; i < s.granular.count; ++i) {
    const Eigen::Vector2d& c = centers[static_cast<std::size_t>(i) % centers.size()];
    for (;;) {
      if (++attempts > 200000) {
        throw InvalidInput("create_scene: could not place " + std::to_string(s.granular.count) +
                           " granular particles without overlap in the workspace");
      }
      const Eigen::Vector3d p(c.x() + normal(rng, spread), c.y() + normal(rng, spread), r);
      if (!inside_xy(ws, p.x(), p.y(), r + 0.01) || !allowed(p.head<2>())) continue;
      bool ok = true;
      for (int j = 0; j < i && ok; ++j) ok = disk_gap(s, s.granular.begin + j, p) >= 2 * r + 1e-4;
      if (!ok) continue;
      s.objects.row(s.granular.begin + i) = p.transpose();
      break;
    }
  }
}

void build_cloth(Rng& rng, SceneState& s, const TaskSpec& spec) {
  const int side = spec.cloth_side;
  const double h = spec.cloth_spacing;
  const double extent = h * (side - 1);
  const Workspace& ws = spec.workspace;
  const double half_diag = extent / std::sqrt(2.0);
  const double margin = half_diag + 0.03;
  if (ws.x_max - ws.x_min < 2 * margin || ws.y_max - ws.y_min < 2 * margin) {
    throw InvalidInput("create_scene: cloth does not fit in the workspace");
  }
  const double cx = uniform(rng, ws.x_min + margin, ws.x_max - margin);
  const double cy = uniform(rng, ws.y_min + margin, ws.y_max - margin);
  const double angle = uniform(rng, -kPi, kPi);
  const double c = std::cos(angle), sn = std::sin(angle);
  s.cloth_side = side;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const double u = j * h - 0.5 * extent, v = i * h - 0.5 * extent;
      s.objects.row(s.cloth.begin + i * side + j) << cx + c * u - sn * v, cy + sn * u + c * v, 0.0;
    }
  }
  auto idx = [&](int i, int j) { return s.cloth.begin + i * side + j; };
  const double diag = h * std::sqrt(2.0);
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      if (j + 1 < side) s.cloth_links.push_back({idx(i, j), idx(i, j + 1), h});
      if (i + 1 < side) s.cloth_links.push_back({idx(i, j), idx(i + 1, j), h});
      if (i + 1 < side && j + 1 < side) s.cloth_links.push_back({idx(i + 1, j), idx(i, j + 1), diag});
    }
  }
}

SceneState create_box_push(Rng& rng, const TaskSpec& spec, SceneState s) {
  const Workspace& ws = spec.workspace;
  const double hx = 0.5 * spec.box_length, hy = 0.5 * spec.box_width;
  const Mat dense = box_surface(hx, hy, spec.box_height, 0.01);
  if (spec.rigid_count > dense.rows()) {
    throw InvalidInput("create_scene: rigid_count exceeds the box surface sampling capacity (" +
                       std::to_string(dense.rows()) + ")");
  }
  RigidBody body;
  body.body_points = farthest_point_sample(dense, spec.rigid_count);
  body.half_x = hx;
  body.half_y = hy;
  const double margin = std::hypot(hx, hy) + spec.pusher_radius + 0.08;
  if (ws.x_max - ws.x_min < 2 * margin || ws.y_max - ws.y_min < 2 * margin) {
    throw InvalidInput("create_scene: box does not fit in the workspace");
  }
  body.x = uniform(rng, ws.x_min + margin, ws.x_max - margin);
  body.y = uniform(rng, ws.y_min + margin, ws.y_max - margin);
  body.theta = uniform(rng, -kPi, kPi);
  s.body = body;
  place_rigid(s);

  // Pusher starts just outside a random point of the box outline.
  const double perimeter = 4 * (hx + hy);
  double u = uniform(rng, 0.0, perimeter);
  Eigen::Vector2d local, normal_local;
  if (u < 2 * hx) {
    local = {-hx + u, -hy};
    normal_local = {0, -1};
  } else if ((u -= 2 * hx) < 2 * hy) {
    local = {hx, -hy + u};
    normal_local = {1, 0};
  } else if ((u -= 2 * hy) < 2 * hx) {
    local = {hx - u, hy};
    normal_local = {0, 1};
  } else {
    u -= 2 * hx;
    local = {-hx, hy - u};
    normal_local = {-1, 0};
  }
  const double gap = uniform(rng, 0.005, 0.03);
  const Eigen::Vector2d p = local + normal_local * (spec.pusher_radius + gap);
  const double c = std::cos(body.theta), sn = std::sin(body.theta);
  const Vec3 anchor(body.x + c * p.x() - sn * p.y(), body.y + sn * p.x() + c * p.y(), kPusherHeight);
  set_effectors(s, {anchor}, split_offsets(spec, [&](int n) { return cylinder_offsets(n, spec.pusher_radius); }));
  return s;
}

SceneState create_rope(Rng& rng, const TaskSpec& spec, SceneState s) {
  const Workspace& ws = spec.workspace;
  bool placed = false;
  for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
    s.rope_links.clear();
    const Eigen::Vector2d start(uniform(rng, ws.x_min + 0.05, ws.x_max - 0.05),
                                uniform(rng, ws.y_min + 0.05, ws.y_max - 0.05));
    placed = place_chain(rng, s, spec, start, uniform(rng, -kPi, kPi), 0.12);
  }
  if (!placed) throw InvalidInput("create_scene: rope does not fit in the workspace");

  const double clearance = spec.pusher_radius + spec.rope_radius;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const int lo = s.rope.count / 4, hi = std::max(lo, 3 * s.rope.count / 4 - 1);
    const int k = s.rope.begin + std::uniform_int_distribution<int>(lo, hi)(rng);
    const int k2 = std::min(k + 1, s.rope.end() - 1) == k ? k - 1 : k + 1;
    Eigen::Vector2d t = xy(s.objects.row(k2)) - xy(s.objects.row(k));
    t.normalize();
    const double side = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
    const Eigen::Vector2d n(-t.y() * side, t.x() * side);
    const Eigen::Vector2d c = xy(s.objects.row(k)) + n * (clearance + uniform(rng, 0.005, 0.03));
    if (!inside_xy(ws, c.x(), c.y(), 0.03)) continue;
    bool clear = true;
    for (int i = s.rope.begin; i < s.rope.end() && clear; ++i) {
      clear = (xy(s.objects.row(i)) - c).norm() > clearance + 1e-3;
    }
    if (!clear) continue;
    set_effectors(s, {Vec3(c.x(), c.y(), kPusherHeight)},
                  split_offsets(spec, [&](int n) { return cylinder_offsets(n, spec.pusher_radius); }));
    return s;
  }
  throw InvalidInput("create_scene: no free pusher placement next to the rope");
}

SceneState create_granular(Rng& rng, const TaskSpec& spec, SceneState s) {
  const Workspace& ws = spec.workspace;
  const double r = spec.granular_radius;
  const double area = (ws.x_max - ws.x_min) * (ws.y_max - ws.y_min);
  if (s.granular.count * kPi * r * r > 0.3 * area) {
    throw InvalidInput("create_scene: granular_count exceeds workspace capacity");
  }
  const int piles = 1 + std::uniform_int_distribution<int>(0, 1)(rng);
  const double per_pile = std::ceil(static_cast<double>(s.granular.count) / piles);
  const double spread = 1.3 * r * std::sqrt(per_pile);
  const double margin = std::min({2 * spread + 0.05, 0.45 * (ws.x_max - ws.x_min), 0.45 * (ws.y_max - ws.y_min)});
  std::vector<Eigen::Vector2d> centers;
  for (int p = 0; p < piles; ++p) {
    centers.emplace_back(uniform(rng, ws.x_min + margin, ws.x_max - margin),
                         uniform(rng, ws.y_min + margin, ws.y_max - margin));
  }
  place_disks(rng, s, spec, centers, spread, [](const Eigen::Vector2d&) { return true; });

  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  for (int i = s.granular.begin; i < s.granular.end(); ++i) centroid += xy(s.objects.row(i));
  centroid /= s.granular.count;
  const double clearance = kCapsuleRadius + r;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double phi = uniform(rng, -kPi, kPi);
    const Eigen::Vector2d dir(std::cos(phi), std::sin(phi));
    double reach = 0.0;
    for (int i = s.granular.begin; i < s.granular.end(); ++i) {
      reach = std::max(reach, (centroid - xy(s.objects.row(i))).dot(dir));
    }
    const Eigen::Vector2d c = centroid - dir * (reach + clearance + uniform(rng, 0.01, 0.04));
    const double angle = phi + 0.5 * kPi;
    const Eigen::Vector2d axis(std::cos(angle), std::sin(angle));
    const Eigen::Vector2d e0 = c - 0.5 * spec.pusher_length * axis, e1 = c + 0.5 * spec.pusher_length * axis;
    if (!inside_xy(ws, e0.x(), e0.y(), 0.02) || !inside_xy(ws, e1.x(), e1.y(), 0.02)) continue;
    s.flat_pusher_angle = angle;
    set_effectors(s, {Vec3(c.x(), c.y(), kPusherHeight)},
                  split_offsets(spec, [&](int n) { return segment_offsets(n, spec.pusher_length, angle); }));
    return s;
  }
  throw InvalidInput("create_scene: no free pusher placement next to the granular pile");
}

SceneState create_cloth(Rng& rng, const TaskSpec& spec, SceneState s, bool edge_grasp) {
  build_cloth(rng, s, spec);
  const int side = spec.cloth_side;
  int gi = 0, gj = 0;
  if (edge_grasp) {
    // Any boundary particle.
    std::vector<std::pair<int, int>> boundary;
    for (int i = 0; i < side; ++i) {
      for (int j = 0; j < side; ++j) {
        if (i == 0 || j == 0 || i == side - 1 || j == side - 1) boundary.emplace_back(i, j);
      }
    }
    std::tie(gi, gj) = boundary[std::uniform_int_distribution<std::size_t>(0, boundary.size() - 1)(rng)];
  } else {
    const int corner = std::uniform_int_distribution<int>(0, 3)(rng);
    gi = (corner & 1) ? side - 1 : 0;
    gj = (corner & 2) ? side - 1 : 0;
  }
  s.cloth_grasp = s.cloth.begin + gi * side + gj;
  const Vec3 anchor = s.objects.row(s.cloth_grasp).transpose();
  set_effectors(s, {anchor}, split_offsets(spec, [&](int n) { return gripper_offsets(n, spec.gripper_width); }));

  if (s.granular.count > 0) {
    // Granules rest on the interior of the flat cloth.
    const Eigen::Vector2d p00 = xy(s.objects.row(s.cloth.begin));
    const Eigen::Vector2d ex = (xy(s.objects.row(s.cloth.begin + 1)) - p00).normalized();
    const Eigen::Vector2d ey = (xy(s.objects.row(s.cloth.begin + side)) - p00).normalized();
    const double extent = spec.cloth_spacing * (side - 1);
    const double inset = spec.cloth_spacing * 0.75;
    const Eigen::Vector2d mid = p00 + 0.5 * extent * (ex + ey);
    place_disks(rng, s, spec, {mid}, extent / 3.0, [&](const Eigen::Vector2d& q) {
      const double a = (q - p00).dot(ex), b = (q - p00).dot(ey);
      return a > inset && a < extent - inset && b > inset && b < extent - inset;
    });
  }
  return s;
}

double segment_distance(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                        Eigen::Vector2d* closest) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  *closest = a + t * ab;
  return (p - *closest).norm();
}

SceneState create_rope_sweep(Rng& rng, const TaskSpec& spec, SceneState s) {
  const Workspace& ws = spec.workspace;
  const int n = s.rope.count;
  const double length = spec.rope_segment * (n - 1);
  const double turn = uniform(rng, 1.6, 2.4) * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
  const double heading0 = uniform(rng, -0.3, 0.3) + (uniform(rng, 0.0, 1.0) < 0.5 ? 0.0 : kPi);
  // Arc with total turn `turn`, centered on the workspace.
  std::vector<Eigen::Vector2d> pts(static_cast<std::size_t>(n));
  pts[0].setZero();
  for (int i = 1; i < n; ++i) {
    const double h = heading0 - 0.5 * turn + turn * (i - 0.5) / (n - 1);
    pts[static_cast<std::size_t>(i)] = pts[static_cast<std::size_t>(i) - 1] +
                                       spec.rope_segment * Eigen::Vector2d(std::cos(h), std::sin(h));
  }
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : pts) mean += p;
  mean /= n;
  const Eigen::Vector2d center(0.5 * (ws.x_min + ws.x_max) + uniform(rng, -0.05, 0.05),
                               0.5 * (ws.y_min + ws.y_max) + uniform(rng, -0.05, 0.05));
  // The sweep side: the arc's outer side, so granules sit ahead of the bulge.
  Eigen::Vector2d chord = pts.back() - pts.front();
  Eigen::Vector2d sweep(-chord.y(), chord.x());
  sweep.normalize();
  if ((pts[static_cast<std::size_t>(n / 2)] - 0.5 * (pts.front() + pts.back())).dot(sweep) < 0) sweep = -sweep;
  const double offset = 0.06;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector2d p = pts[static_cast<std::size_t>(i)] - mean + center - offset * sweep;
    if (!inside_xy(ws, p.x(), p.y(), 0.02)) throw InvalidInput("create_scene: rope does not fit in the workspace");
    s.objects.row(s.rope.begin + i) << p.x(), p.y(), spec.rope_radius;
  }
  for (int i = 0; i + 1 < n; ++i) s.rope_links.push_back({s.rope.begin + i, s.rope.begin + i + 1, spec.rope_segment});
  if ((xy(s.objects.row(s.rope.begin)) - xy(s.objects.row(s.rope.end() - 1))).norm() > 0.95 * length) {
    throw InvalidInput("create_scene: rope ends too far apart");
  }
  s.rope_pins = {{s.rope.begin, 0}, {s.rope.end() - 1, 1}};

  const double clearance = spec.rope_radius + spec.granular_radius + 0.003;
  const Eigen::Vector2d mid = center - offset * sweep + sweep * 0.1;
  place_disks(rng, s, spec, {mid}, 0.06, [&](const Eigen::Vector2d& q) {
    Eigen::Vector2d cp;
    for (int i = s.rope.begin; i + 1 < s.rope.end(); ++i) {
      if (segment_distance(q, xy(s.objects.row(i)), xy(s.objects.row(i + 1)), &cp) < clearance) return false;
    }
    return (q - center).dot(sweep) > -offset + 0.02;
  });

  std::vector<Vec3> anchors = {s.objects.row(s.rope.begin).transpose(), s.objects.row(s.rope.end() - 1).transpose()};
  set_effectors(s, anchors, split_offsets(spec, [&](int m) { return gripper_offsets(m, spec.gripper_width); }));
  return s;
}

// ---- constraint projection -------------------------------------------------

// Stretch-only links resist extension but buckle freely under compression.
void project_link(Mat& P, const DistanceConstraint& c, const std::vector<double>& w, bool stretch_only) {
  const double wi = w[static_cast<std::size_t>(c.i)], wj = w[static_cast<std::size_t>(c.j)];
  if (wi + wj == 0.0) return;
  Eigen::RowVector3d d = P.row(c.j) - P.row(c.i);
  const double len = d.norm();
  if (len < 1e-15 || (stretch_only && len <= c.rest)) return;
  const Eigen::RowVector3d corr = (len - c.rest) / (len * (wi + wj)) * d;
  P.row(c.i) += wi * corr;
  P.row(c.j) -= wj * corr;
}

double max_strain(const Mat& P, const std::vector<DistanceConstraint>& links, bool stretch_only = false) {
  double m = 0.0;
  for (const auto& c : links) {
    const double e = ((P.row(c.j) - P.row(c.i)).norm() - c.rest) / c.rest;
    m = std::max(m, stretch_only ? e : std::abs(e));
  }
  return m;
}

void sweep_links(Mat& P, const std::vector<DistanceConstraint>& links, const std::vector<double>& w,
                 bool stretch_only = false) {
  for (const auto& c : links) project_link(P, c, w, stretch_only);
  for (auto it = links.rbegin(); it != links.rend(); ++it) project_link(P, *it, w, stretch_only);
}

// Pushes the xy position of p out of a disk; returns the penetration removed.
double push_out_of_disk(Eigen::Ref<Eigen::RowVector3d> p, const Eigen::Vector2d& c, double radius) {
  Eigen::Vector2d d(p(0) - c.x(), p(1) - c.y());
  const double len = d.norm();
  if (len >= radius) return 0.0;
  const Eigen::Vector2d dir = len > 1e-12 ? Eigen::Vector2d(d / len) : Eigen::Vector2d(1.0, 0.0);
  p(0) = c.x() + dir.x() * radius;
  p(1) = c.y() + dir.y() * radius;
  return radius - len;
}

double push_out_of_capsule(Eigen::Ref<Eigen::RowVector3d> p, const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                           double radius) {
  Eigen::Vector2d cp;
  if (segment_distance(Eigen::Vector2d(p(0), p(1)), a, b, &cp) >= radius) return 0.0;
  return push_out_of_disk(p, cp, radius);
}

// Separates overlapping spheres in [begin, end); planar disks when `planar`.
double resolve_pairs(Mat& P, int begin, int end, double radius, bool planar) {
  double worst = 0.0;
  const double target = 2 * radius;
  for (int i = begin; i < end; ++i) {
    for (int j = i + 1; j < end; ++j) {
      Eigen::RowVector3d d = P.row(j) - P.row(i);
      if (planar) d(2) = 0.0;
      const double len = d.norm();
      if (len >= target) continue;
      worst = std::max(worst, target - len);
      const Eigen::RowVector3d dir = len > 1e-12 ? Eigen::RowVector3d(d / len) : Eigen::RowVector3d(1.0, 0.0, 0.0);
      const Eigen::RowVector3d shift = 0.5 * (target - len) * dir;
      P.row(i) -= shift;
      P.row(j) += shift;
    }
  }
  return worst;
}

void resolve_box(SceneState& s, const TaskSpec& spec, const Vec3& pusher) {
  RigidBody& b = *s.body;
  const double rho = spec.pusher_radius;
  const double gyration2 = (b.half_x * b.half_x + b.half_y * b.half_y) / 3.0;
  auto contact = [&](Eigen::Vector2d* n, Eigen::Vector2d* r) {
    const double c = std::cos(b.theta), sn = std::sin(b.theta);
    const Eigen::Vector2d rel(pusher.x() - b.x, pusher.y() - b.y);
    const Eigen::Vector2d l(c * rel.x() + sn * rel.y(), -sn * rel.x() + c * rel.y());
    Eigen::Vector2d q(std::clamp(l.x(), -b.half_x, b.half_x), std::clamp(l.y(), -b.half_y, b.half_y));
    Eigen::Vector2d nl;
    double pen;
    if (q == l) {
      // Center inside the footprint: leave through the nearest face.
      const double dx = b.half_x - std::abs(l.x()), dy = b.half_y - std::abs(l.y());
      if (dx < dy) {
        q.x() = l.x() >= 0 ? b.half_x : -b.half_x;
        nl = {l.x() >= 0 ? -1.0 : 1.0, 0.0};
        pen = rho + dx;
      } else {
        q.y() = l.y() >= 0 ? b.half_y : -b.half_y;
        nl = {0.0, l.y() >= 0 ? -1.0 : 1.0};
        pen = rho + dy;
      }
    } else {
      const double d = (q - l).norm();
      nl = (q - l) / d;
      pen = rho - d;
    }
    *n = Eigen::Vector2d(c * nl.x() - sn * nl.y(), sn * nl.x() + c * nl.y());
    *r = Eigen::Vector2d(c * q.x() - sn * q.y(), sn * q.x() + c * q.y());
    return pen;
  };
  Eigen::Vector2d n, r;
  for (int it = 0; it < 50; ++it) {
    const double pen = contact(&n, &r);
    if (pen <= 1e-13) return;
    // Quasi-static push with an ellipsoidal limit surface: the normal force
    // produces translation along n and rotation about the center of friction.
    const double cross = r.x() * n.y() - r.y() * n.x();
    const double scale = pen / (1.0 + cross * cross / gyration2);
    b.x += scale * n.x();
    b.y += scale * n.y();
    b.theta += scale * cross / gyration2;
  }
  const double pen = contact(&n, &r);
  if (pen > 0) {
    b.x += pen * n.x();
    b.y += pen * n.y();
  }
}

void resolve_rope(SceneState& s, const TaskSpec& spec, const std::vector<Vec3>& anchors) {
  std::vector<double> w(static_cast<std::size_t>(s.objects.rows()), 1.0);
  for (auto [idx, g] : s.rope_pins) {
    s.objects.row(idx) = anchors[static_cast<std::size_t>(g)].transpose();
    w[static_cast<std::size_t>(idx)] = 0.0;
  }
  const bool cylinder = spec.effector_kind() == EffectorKind::kCylinder;
  const double radius = spec.pusher_radius + spec.rope_radius;
  const Eigen::Vector2d c = xy(anchors[0].transpose());
  for (int it = 0; it < kMaxSolverIterations; ++it) {
    double pen = 0.0;
    if (cylinder) {
      for (int i = s.rope.begin; i < s.rope.end(); ++i) pen = std::max(pen, push_out_of_disk(s.objects.row(i), c, radius));
    }
    sweep_links(s.objects, s.rope_links, w);
    if (it + 1 >= spec.solver_iterations && pen <= kContactTolerance &&
        max_strain(s.objects, s.rope_links) <= kLinkTolerance) {
      break;
    }
  }
}

bool solve_cloth(Mat& P, const SceneState& s, const TaskSpec& spec, const std::vector<double>& w) {
  for (int it = 0; it < kMaxSolverIterations; ++it) {
    sweep_links(P, s.cloth_links, w, true);
    for (int i = s.cloth.begin; i < s.cloth.end(); ++i) P(i, 2) = std::max(0.0, P(i, 2));
    if (it + 1 >= spec.solver_iterations && max_strain(P, s.cloth_links, true) <= kLinkTolerance) return true;
  }
  return false;
}

void resolve_cloth(SceneState& s, const TaskSpec& spec, const Vec3& grasp, double sag) {
  const Mat start = s.objects;
  std::vector<double> w(static_cast<std::size_t>(s.objects.rows()), 1.0);
  for (int i = s.cloth.begin; i < s.cloth.end(); ++i) s.objects(i, 2) = std::max(0.0, s.objects(i, 2) - sag);
  if (s.cloth_grasp >= 0) {
    s.objects.row(s.cloth_grasp) = grasp.transpose();
    w[static_cast<std::size_t>(s.cloth_grasp)] = 0.0;
  }
  const Mat predicted = s.objects;
  solve_cloth(s.objects, s, spec, w);

  // Static floor friction: particles that rested on the floor and would slip
  // less than the friction budget stay put; the rest slide freely.
  const double budget = spec.friction * sag;
  Mat held = predicted;
  std::vector<double> wf = w;
  bool any = false;
  for (int i = s.cloth.begin; i < s.cloth.end(); ++i) {
    if (w[static_cast<std::size_t>(i)] == 0.0 || start(i, 2) > 0.0 || s.objects(i, 2) > 0.0) continue;
    if ((s.objects.row(i) - start.row(i)).head<2>().norm() <= budget) {
      held.row(i) = start.row(i);
      wf[static_cast<std::size_t>(i)] = 0.0;
      any = true;
    }
  }
  if (any && solve_cloth(held, s, spec, wf)) s.objects = held;
}

struct SurfaceHit {
  bool hit = false;
  std::array<int, 3> v{};
  Eigen::Vector3d bary = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double signed_distance = 0.0;
};

// Cloth triangle under p (in xy) whose upward-facing plane is closest to
// touching a sphere of the given radius.
SurfaceHit cloth_support(const SceneState& s, const Mat& P, const Eigen::Vector3d& p, double radius, double reach) {
  SurfaceHit best;
  const int side = s.cloth_side;
  auto at = [&](int i, int j) { return s.cloth.begin + i * side + j; };
  for (int i = 0; i + 1 < side; ++i) {
    for (int j = 0; j + 1 < side; ++j) {
      const std::array<std::array<int, 3>, 2> tris = {
          std::array<int, 3>{at(i, j), at(i + 1, j), at(i, j + 1)},
          std::array<int, 3>{at(i + 1, j + 1), at(i, j + 1), at(i + 1, j)}};
      for (const auto& t : tris) {
        const Eigen::Vector3d a = P.row(t[0]).transpose(), b = P.row(t[1]).transpose(), c = P.row(t[2]).transpose();
        Eigen::Vector3d n = (b - a).cross(c - a);
        const double nn = n.norm();
        if (nn < 1e-12) continue;
        n /= nn;
        if (n.z() < 0) n = -n;
        if (n.z() < 0.1) continue;
        const double det = (b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y());
        if (std::abs(det) < 1e-14) continue;
        const double l1 = ((p.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (p.y() - a.y())) / det;
        const double l2 = ((b.x() - a.x()) * (p.y() - a.y()) - (p.x() - a.x()) * (b.y() - a.y())) / det;
        const double l0 = 1.0 - l1 - l2;
        if (l0 < 0 || l1 < 0 || l2 < 0) continue;
        const double sd = (p - a).dot(n);
        if (sd <= -radius || sd > radius + reach) continue;
        if (!best.hit || std::abs(sd - radius) < std::abs(best.signed_distance - radius)) {
          best.hit = true;
          best.v = t;
          best.bary = {l0, l1, l2};
          best.normal = n;
          best.signed_distance = sd;
        }
      }
    }
  }
  return best;
}

double resolve_granules_on_cloth(SceneState& s, const TaskSpec& spec, bool friction_pass, const Mat& ref,
                                 const Mat& pred) {
  const double r = spec.granular_radius;
  double worst = 0.0;
  for (int it = 0; it < kMaxSolverIterations; ++it) {
    worst = 0.0;
    for (int i = s.granular.begin; i < s.granular.end(); ++i) {
      Eigen::Vector3d p = s.objects.row(i).transpose();
      const SurfaceHit hit = cloth_support(s, s.objects, p, r, 0.0);
      if (hit.hit && hit.signed_distance < r) {
        worst = std::max(worst, r - hit.signed_distance);
        p += (r - hit.signed_distance) * hit.normal;
      }
      if (p.z() < r) {
        worst = std::max(worst, r - p.z());
        p.z() = r;
      }
      s.objects.row(i) = p.transpose();
    }
    worst = std::max(worst, resolve_pairs(s.objects, s.granular.begin, s.granular.end(), r, false));
    if (it + 1 >= spec.solver_iterations && worst <= kContactTolerance) break;
  }
  if (friction_pass) {
    // Position-based Coulomb friction: tangential slip relative to the
    // carried reference is cancelled up to mu times the normal correction.
    for (int i = s.granular.begin; i < s.granular.end(); ++i) {
      const Eigen::RowVector3d corr = s.objects.row(i) - pred.row(i);
      const double cn = corr.norm();
      if (cn < 1e-15) continue;
      const Eigen::RowVector3d dir = corr / cn;
      const Eigen::RowVector3d delta = s.objects.row(i) - ref.row(i);
      const Eigen::RowVector3d tangential = delta - delta.dot(dir) * dir;
      const double tn = tangential.norm();
      if (tn <= spec.friction * cn) {
        s.objects.row(i) -= tangential;
      } else {
        s.objects.row(i) -= tangential * (spec.friction * cn / tn);
      }
    }
  }
  return worst;
}

void resolve_cloth_gather(SceneState& s, const TaskSpec& spec, const Vec3& grasp, double sag) {
  const Mat before = s.objects;
  resolve_cloth(s, spec, grasp, sag);
  const double r = spec.granular_radius;
  Mat ref = s.objects, pred = s.objects;
  for (int i = s.granular.begin; i < s.granular.end(); ++i) {
    Eigen::Vector3d p = before.row(i).transpose();
    const SurfaceHit hit = cloth_support(s, before, p, r, 0.002);
    if (hit.hit) {
      for (int k = 0; k < 3; ++k) {
        p += hit.bary[k] * (s.objects.row(hit.v[static_cast<std::size_t>(k)]) -
                            before.row(hit.v[static_cast<std::size_t>(k)])).transpose();
      }
    }
    ref.row(i) = p.transpose();
    p.z() = std::max(r, p.z() - sag);
    pred.row(i) = p.transpose();
    s.objects.row(i) = p.transpose();
  }
  resolve_granules_on_cloth(s, spec, true, ref, pred);
  resolve_granules_on_cloth(s, spec, false, ref, pred);
}

void resolve_planar_granules(SceneState& s, const TaskSpec& spec, const std::vector<Vec3>& anchors) {
  const double r = spec.granular_radius;
  const EffectorKind kind = spec.effector_kind();
  Eigen::Vector2d e0, e1;
  if (kind == EffectorKind::kFlatPusher) {
    const Eigen::Vector2d c = xy(anchors[0].transpose());
    const Eigen::Vector2d axis(std::cos(s.flat_pusher_angle), std::sin(s.flat_pusher_angle));
    e0 = c - 0.5 * spec.pusher_length * axis;
    e1 = c + 0.5 * spec.pusher_length * axis;
  }
  for (int it = 0; it < kMaxSolverIterations; ++it) {
    double worst = 0.0;
    for (int i = s.granular.begin; i < s.granular.end(); ++i) {
      auto p = s.objects.row(i);
      if (kind == EffectorKind::kFlatPusher) {
        worst = std::max(worst, push_out_of_capsule(p, e0, e1, kCapsuleRadius + r));
      } else if (kind == EffectorKind::kCylinder) {
        worst = std::max(worst, push_out_of_disk(p, xy(anchors[0].transpose()), spec.pusher_radius + r));
      }
      for (int k = s.rope.begin; k + 1 < s.rope.end(); ++k) {
        worst = std::max(worst, push_out_of_capsule(p, xy(s.objects.row(k)), xy(s.objects.row(k + 1)),
                                                    spec.rope_radius + r));
      }
    }
    worst = std::max(worst, resolve_pairs(s.objects, s.granular.begin, s.granular.end(), r, true));
    if (it + 1 >= spec.solver_iterations && worst <= kContactTolerance) break;
  }
}

// Cloth tasks under gravity sag. On an undriven step that follows another
// undriven step the sag is shortened (bisection) until the object motion
// does not exceed the previous step's, so a passive scene settles instead of
// accelerating when granules slide off steepening cloth.
SceneState resolve_sagging(const SceneState& scene, const TaskSpec& spec, bool passive) {
  auto run = [&](double sag) {
    SceneState next = scene;
    if (spec.task == TaskId::kCloth) {
      resolve_cloth(next, spec, scene.anchors[0], sag);
    } else {
      resolve_cloth_gather(next, spec, scene.anchors[0], sag);
    }
    return next;
  };
  SceneState full = run(kSag);
  const double budget = scene.passive_motion;
  if (!passive || !std::isfinite(budget) || (full.objects - scene.objects).squaredNorm() <= budget) return full;
  SceneState best = scene;
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 30; ++it) {
    const double mid = 0.5 * (lo + hi);
    SceneState trial = run(mid * kSag);
    if ((trial.objects - scene.objects).squaredNorm() <= budget) {
      lo = mid;
      best = std::move(trial);
    } else {
      hi = mid;
    }
  }
  return best;
}

bool planar_effector(TaskId task) {
  return task == TaskId::kBoxPush || task == TaskId::kRope || task == TaskId::kGranular ||
         task == TaskId::kRopeSweep;
}

}  // namespace

// ---- names and spec --------------------------------------------------------

std::string_view task_name(TaskId task) {
  switch (task) {
    case TaskId::kBoxPush: return "box_push";
    case TaskId::kRope: return "rope";
    case TaskId::kGranular: return "granular";
    case TaskId::kCloth: return "cloth";
    case TaskId::kClothGather: return "cloth_gather";
    case TaskId::kRopeSweep: return "rope_sweep";
  }
  return "unknown";
}

TaskId task_from_name(std::string_view name) {
  for (TaskId t : {TaskId::kBoxPush, TaskId::kRope, TaskId::kGranular, TaskId::kCloth, TaskId::kClothGather,
                   TaskId::kRopeSweep}) {
    if (task_name(t) == name) return t;
  }
  throw InvalidInput("unknown task id '" + std::string(name) + "'");
}

bool Workspace::contains(const Vec3& p, double margin) const {
  return inside_xy(*this, p.x(), p.y(), margin) && p.z() >= 0.0 && p.z() <= z_max;
}

TaskSpec TaskSpec::defaults(TaskId task) {
  TaskSpec s;
  s.task = task;
  switch (task) {
    case TaskId::kBoxPush: s.rigid_count = 32; break;
    case TaskId::kRope: s.rope_count = 32; break;
    case TaskId::kGranular: s.granular_count = 32; break;
    case TaskId::kCloth: s.cloth_side = 6; break;
    case TaskId::kClothGather:
      s.cloth_side = 6;
      s.granular_count = 12;
      break;
    case TaskId::kRopeSweep:
      s.rope_count = 24;
      s.granular_count = 24;
      s.rope_segment = 0.02;
      break;
  }
  return s;
}

int TaskSpec::num_objects() const { return rigid_count + rope_count + cloth_side * cloth_side + granular_count; }

int TaskSpec::effector_groups() const { return task == TaskId::kRopeSweep ? 2 : 1; }

EffectorKind TaskSpec::effector_kind() const {
  switch (task) {
    case TaskId::kBoxPush:
    case TaskId::kRope: return EffectorKind::kCylinder;
    case TaskId::kGranular: return EffectorKind::kFlatPusher;
    default: return EffectorKind::kGripper;
  }
}

void TaskSpec::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidInput("TaskSpec: " + msg); };
  if (!(dt > 0)) fail("dt must be positive");
  if (!(max_speed > 0)) fail("max_speed must be positive");
  if (!(friction >= 0)) fail("friction must be non-negative");
  if (solver_iterations < 1) fail("solver_iterations must be at least 1");
  if (!(workspace.x_max > workspace.x_min) || !(workspace.y_max > workspace.y_min) || !(workspace.z_max > 0)) {
    fail("workspace bounds are degenerate");
  }
  if (effector_points < effector_groups()) fail("effector_points must be at least the number of effector groups");
  for (double v : {pusher_radius, pusher_length, gripper_width, box_length, box_width, box_height, rope_segment,
                   rope_radius, cloth_spacing, granular_radius}) {
    if (!(v > 0)) fail("geometry parameters must be positive");
  }
  if (rigid_count < 0 || rope_count < 0 || cloth_side < 0 || granular_count < 0) fail("counts must be non-negative");
  auto need = [&](bool used, int count, int minimum, const char* name) {
    if (used && count < minimum) fail(std::string(name) + " must be at least " + std::to_string(minimum));
    if (!used && count != 0) fail(std::string(name) + " is not used by task " + std::string(task_name(task)));
  };
  const bool rigid = task == TaskId::kBoxPush;
  const bool rope = task == TaskId::kRope || task == TaskId::kRopeSweep;
  const bool cloth = task == TaskId::kCloth || task == TaskId::kClothGather;
  const bool granular = task == TaskId::kGranular || task == TaskId::kClothGather || task == TaskId::kRopeSweep;
  need(rigid, rigid_count, 1, "rigid_count");
  need(rope, rope_count, 2, "rope_count");
  need(cloth, cloth_side, 2, "cloth_side");
  need(granular, granular_count, 1, "granular_count");
}

KvConfig TaskSpec::to_kv() const {
  KvConfig kv;
  kv.set("task", std::string(task_name(task)));
  kv.set_number("rigid_count", rigid_count);
  kv.set_number("rope_count", rope_count);
  kv.set_number("cloth_side", cloth_side);
  kv.set_number("granular_count", granular_count);
  kv.set_number("workspace_x_min", workspace.x_min);
  kv.set_number("workspace_x_max", workspace.x_max);
  kv.set_number("workspace_y_min", workspace.y_min);
  kv.set_number("workspace_y_max", workspace.y_max);
  kv.set_number("workspace_z_max", workspace.z_max);
  kv.set_number("friction", friction);
  kv.set_number("dt", dt);
  kv.set_number("max_speed", max_speed);
  kv.set_number("solver_iterations", solver_iterations);
  kv.set_number("effector_points", effector_points);
  kv.set_number("pusher_radius", pusher_radius);
  kv.set_number("pusher_length", pusher_length);
  kv.set_number("gripper_width", gripper_width);
  kv.set_number("box_length", box_length);
  kv.set_number("box_width", box_width);
  kv.set_number("box_height", box_height);
  kv.set_number("rope_segment", rope_segment);
  kv.set_number("rope_radius", rope_radius);
  kv.set_number("cloth_spacing", cloth_spacing);
  kv.set_number("granular_radius", granular_radius);
  return kv;
}

TaskSpec TaskSpec::from_kv(const KvConfig& kv) {
  TaskSpec s = defaults(task_from_name(kv.get_string("task")));
  auto i = [&](const char* key, int& v) { v = static_cast<int>(kv.get_int(key, v)); };
  auto d = [&](const char* key, double& v) { v = kv.get_double(key, v); };
  i("rigid_count", s.rigid_count);
  i("rope_count", s.rope_count);
  i("cloth_side", s.cloth_side);
  i("granular_count", s.granular_count);
  d("workspace_x_min", s.workspace.x_min);
  d("workspace_x_max", s.workspace.x_max);
  d("workspace_y_min", s.workspace.y_min);
  d("workspace_y_max", s.workspace.y_max);
  d("workspace_z_max", s.workspace.z_max);
  d("friction", s.friction);
  d("dt", s.dt);
  d("max_speed", s.max_speed);
  i("solver_iterations", s.solver_iterations);
  i("effector_points", s.effector_points);
  d("pusher_radius", s.pusher_radius);
  d("pusher_length", s.pusher_length);
  d("gripper_width", s.gripper_width);
  d("box_length", s.box_length);
  d("box_width", s.box_width);
  d("box_height", s.box_height);
  d("rope_segment", s.rope_segment);
  d("rope_radius", s.rope_radius);
  d("cloth_spacing", s.cloth_spacing);
  d("granular_radius", s.granular_radius);
  s.validate();
  return s;
}

// ---- scene -----------------------------------------------------------------

ParticleSet SceneState::particles() const {
  const Eigen::Index n = objects.rows(), m = effector.rows();
  Mat pos(n + m, 3), motion = Mat::Zero(n + m, 3);
  pos.topRows(n) = objects;
  pos.bottomRows(m) = effector;
  motion.bottomRows(m) = last_motion;
  std::vector<Material> mats = object_materials;
  mats.insert(mats.end(), static_cast<std::size_t>(m), Material::kEffector);
  return ParticleSet(std::move(pos), std::move(mats), std::move(motion));
}

Mat SceneState::group_anchors() const {
  Mat out(static_cast<Eigen::Index>(anchors.size()), 3);
  for (std::size_t g = 0; g < anchors.size(); ++g) out.row(static_cast<Eigen::Index>(g)) = anchors[g].transpose();
  return out;
}

SceneState create_scene(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  SceneState s;
  allocate_objects(s, spec);
  switch (spec.task) {
    case TaskId::kBoxPush: return create_box_push(rng, spec, std::move(s));
    case TaskId::kRope: return create_rope(rng, spec, std::move(s));
    case TaskId::kGranular: return create_granular(rng, spec, std::move(s));
    case TaskId::kCloth: return create_cloth(rng, spec, std::move(s), false);
    case TaskId::kClothGather: return create_cloth(rng, spec, std::move(s), true);
    case TaskId::kRopeSweep: return create_rope_sweep(rng, spec, std::move(s));
  }
  throw InvalidInput("create_scene: unknown task");
}

Mat expand_action(const SceneState& scene, const Mat& group_motion) {
  const auto groups = static_cast<Eigen::Index>(scene.anchors.size());
  if (group_motion.rows() != groups || group_motion.cols() != 3) {
    throw InvalidShape("expand_action: expected " + std::to_string(groups) + "x3 group motion");
  }
  Mat out(scene.effector.rows(), 3);
  for (Eigen::Index k = 0; k < out.rows(); ++k) {
    out.row(k) = group_motion.row(scene.effector_group[static_cast<std::size_t>(k)]);
  }
  return out;
}

SceneState step(const SceneState& scene, const Mat& ee_motion, const TaskSpec& spec) {
  const Eigen::Index m = scene.effector.rows();
  if (ee_motion.rows() != m || ee_motion.cols() != 3) {
    throw InvalidShape("step: expected " + std::to_string(m) + "x3 effector motion");
  }
  if (!ee_motion.allFinite()) throw InvalidAction("step: effector motion is not finite");
  const double limit = spec.max_step() * (1.0 + 1e-9);
  std::vector<Vec3> group_motion(scene.anchors.size(), Vec3::Zero());
  std::vector<bool> seen(scene.anchors.size(), false);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Vec3 u = ee_motion.row(k).transpose();
    if (u.norm() > limit) {
      throw InvalidAction("step: effector speed " + std::to_string(u.norm() / spec.dt) + " m/s exceeds the limit " +
                          std::to_string(spec.max_speed) + " m/s");
    }
    const auto g = static_cast<std::size_t>(scene.effector_group[static_cast<std::size_t>(k)]);
    if (!seen[g]) {
      group_motion[g] = u;
      seen[g] = true;
    } else if ((group_motion[g] - u).cwiseAbs().maxCoeff() > 1e-12) {
      throw InvalidAction("step: points of one rigid effector must move together");
    }
  }
  std::vector<Vec3> next_anchors = scene.anchors;
  for (std::size_t g = 0; g < next_anchors.size(); ++g) {
    if (planar_effector(spec.task) && group_motion[g].z() != 0.0) {
      throw InvalidAction("step: planar effector cannot move vertically");
    }
    next_anchors[g] += group_motion[g];
    if (!spec.workspace.contains(next_anchors[g])) throw InvalidAction("step: effector leaves the workspace");
  }
  if (spec.task == TaskId::kRopeSweep) {
    const double length = spec.rope_segment * (scene.rope.count - 1);
    if ((next_anchors[0] - next_anchors[1]).norm() > 0.95 * length) {
      throw InvalidAction("step: grippers would stretch the rope beyond its length");
    }
  }

  bool passive = true;
  for (const Vec3& u : group_motion) passive = passive && u.isZero();

  SceneState next = scene;
  switch (spec.task) {
    case TaskId::kBoxPush:
      resolve_box(next, spec, scene.anchors[0]);
      place_rigid(next);
      break;
    case TaskId::kRope: resolve_rope(next, spec, scene.anchors); break;
    case TaskId::kGranular: resolve_planar_granules(next, spec, scene.anchors); break;
    case TaskId::kCloth:
    case TaskId::kClothGather: next = resolve_sagging(scene, spec, passive); break;
    case TaskId::kRopeSweep:
      resolve_rope(next, spec, scene.anchors);
      resolve_planar_granules(next, spec, scene.anchors);
      break;
  }
  next.passive_motion = passive ? (next.objects - scene.objects).squaredNorm()
                                : std::numeric_limits<double>::infinity();
  next.effector = scene.effector + ee_motion;
  next.last_motion = next.effector - scene.effector;
  next.anchors = next_anchors;
  return next;
}

SceneDiagnostics diagnose(const SceneState& scene, const TaskSpec& spec) {
  SceneDiagnostics d;
  d.max_rope_strain = scene.rope_links.empty() ? 0.0 : max_strain(scene.objects, scene.rope_links);
  if (scene.body) {
    const Mat& b = scene.body->body_points;
    for (Eigen::Index i = 0; i < b.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < b.rows(); ++j) {
        const double ref = (b.row(i) - b.row(j)).norm();
        const double now = (scene.objects.row(scene.rigid.begin + i) - scene.objects.row(scene.rigid.begin + j)).norm();
        d.max_rigid_distortion = std::max(d.max_rigid_distortion, std::abs(now - ref));
      }
    }
  }
  d.min_z = std::min(scene.objects.col(2).minCoeff(), scene.effector.col(2).minCoeff());
  const double r = spec.granular_radius;
  const bool planar = spec.task != TaskId::kClothGather;
  for (int i = scene.granular.begin; i < scene.granular.end(); ++i) {
    for (int j = i + 1; j < scene.granular.end(); ++j) {
      Eigen::RowVector3d diff = scene.objects.row(i) - scene.objects.row(j);
      if (planar) diff(2) = 0.0;
      d.max_granular_overlap = std::max(d.max_granular_overlap, 2 * r - diff.norm());
    }
  }
  return d;
}

// ---- episodes --------------------------------------------------------------

ParticleSet Episode::frame(int t) const {
  if (t < 0 || t >= horizon()) throw InvalidInput("Episode::frame: index out of range");
  return ParticleSet(positions[static_cast<std::size_t>(t)], materials, motions[static_cast<std::size_t>(t)]);
}

Mat Episode::object_positions(int t) const { return frame(t).object_positions(); }

Mat Episode::effector_positions(int t) const { return frame(t).effector_positions(); }

Episode record_episode(const std::vector<SceneState>& states) {
  if (states.empty()) throw InvalidInput("record_episode: no states");
  Episode ep;
  ep.materials = states.front().particles().materials();
  for (const SceneState& s : states) {
    ParticleSet p = s.particles();
    ep.positions.push_back(p.positions());
    ep.motions.push_back(p.motion());
  }
  return ep;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(seed ^ mix(stream + 0x632BE59BD9B4E019ull));
}

namespace {

// Random smooth effector motion aimed at the objects of each task.
class TrajectorySampler {
 public:
  TrajectorySampler(const TaskSpec& spec, std::uint64_t seed) : spec_(spec), rng_(seed) {
    speed_ = uniform(rng_, 0.4, 0.8) * spec.max_step();
  }

  Mat next(const SceneState& s) {
    Mat a = Mat::Zero(static_cast<Eigen::Index>(s.anchors.size()), 3);
    switch (spec_.task) {
      case TaskId::kBoxPush: a.row(0) = planar(s.anchors[0], Vec3(s.body->x, s.body->y, 0), 0.12); break;
      case TaskId::kRope: a.row(0) = planar(s.anchors[0], nearest(s, s.rope, s.anchors[0]), 0.05); break;
      case TaskId::kGranular: a.row(0) = planar(s.anchors[0], centroid(s, s.granular), 0.1); break;
      case TaskId::kCloth: a.row(0) = cloth(s.anchors[0]); break;
      case TaskId::kClothGather: a.row(0) = lift(s.anchors[0]); break;
      case TaskId::kRopeSweep: a = sweep(s); break;
    }
    for (Eigen::Index g = 0; g < a.rows(); ++g) a.row(g) = keep_inside(s.anchors[static_cast<std::size_t>(g)], a.row(g));
    return a;
  }

 private:
  static Vec3 centroid(const SceneState& s, IndexRange r) {
    Vec3 c = Vec3::Zero();
    for (int i = r.begin; i < r.end(); ++i) c += s.objects.row(i).transpose();
    return c / r.count;
  }

  static Vec3 nearest(const SceneState& s, IndexRange r, const Vec3& p) {
    Vec3 best = s.objects.row(r.begin).transpose();
    for (int i = r.begin; i < r.end(); ++i) {
      if ((s.objects.row(i).transpose() - p).head<2>().norm() < (best - p).head<2>().norm()) {
        best = s.objects.row(i).transpose();
      }
    }
    return best;
  }

  Vec3 center() const {
    const Workspace& ws = spec_.workspace;
    return {0.5 * (ws.x_min + ws.x_max), 0.5 * (ws.y_min + ws.y_max), 0.0};
  }

  double speed_step(double lo, double hi) {
    speed_ = std::clamp(speed_ + normal(rng_, 0.05 * spec_.max_step()), lo * spec_.max_step(), hi * spec_.max_step());
    return speed_;
  }

  Vec3 planar(const Vec3& anchor, const Vec3& target, double attract) {
    const Eigen::Vector2d to = (target - anchor).head<2>();
    if (!started_) {
      heading_ = std::atan2(to.y(), to.x()) + uniform(rng_, -0.5, 0.5);
      started_ = true;
    }
    heading_ += normal(rng_, 0.15);
    if (to.norm() > attract) heading_ = std::atan2(to.y(), to.x()) + normal(rng_, 0.3);
    const double v = speed_step(0.3, 0.9);
    Vec3 u(v * std::cos(heading_), v * std::sin(heading_), 0.0);
    if (!spec_.workspace.contains(anchor + u, 0.04)) {
      const Vec3 c = center() - anchor;
      heading_ = std::atan2(c.y(), c.x()) + normal(rng_, 0.3);
      u = Vec3(v * std::cos(heading_), v * std::sin(heading_), 0.0);
    }
    return u;
  }

  Vec3 cloth(const Vec3& anchor) {
    if (phase_ == 0) {
      lift_steps_ = std::uniform_int_distribution<int>(3, 7)(rng_);
      phase_ = 1;
    }
    if (lift_steps_ > 0) {
      --lift_steps_;
      return {0.0, 0.0, speed_step(0.5, 0.9)};
    }
    Vec3 u = planar(anchor, anchor, 1.0) * 0.8;
    u.z() = normal(rng_, 0.3 * spec_.max_step());
    if (anchor.z() + u.z() < 0.03 || anchor.z() + u.z() > 0.18) u.z() = -u.z();
    return u;
  }

  Vec3 lift(const Vec3& anchor) {
    const double v = speed_step(0.4, 0.9);
    switch (phase_) {
      case 0:
        z_target_ = uniform(rng_, 0.08, 0.15);
        phase_ = 1;
        [[fallthrough]];
      case 1:
        if (anchor.z() + v < z_target_) return {0, 0, v};
        phase_ = 2;
        hold_ = std::uniform_int_distribution<int>(2, 5)(rng_);
        return {0, 0, std::max(0.0, z_target_ - anchor.z())};
      case 2:
        if (--hold_ > 0) return Vec3::Zero();
        phase_ = 3;
        [[fallthrough]];
      default:
        if (anchor.z() - v > 0.03) return {0, 0, -v};
        phase_ = 0;
        return Vec3::Zero();
    }
  }

  Mat sweep(const SceneState& s) {
    const Vec3 mid = 0.5 * (s.anchors[0] + s.anchors[1]);
    Vec3 common = planar(mid, centroid(s, s.granular), 0.05);
    const double length = spec_.rope_segment * (s.rope.count - 1);
    Vec3 chord = s.anchors[1] - s.anchors[0];
    const double span = chord.norm();
    chord /= std::max(span, 1e-12);
    double stretch = normal(rng_, 0.1 * spec_.max_step());
    if (span > 0.85 * length) stretch = -0.2 * spec_.max_step();
    if (span < 0.5 * length) stretch = 0.2 * spec_.max_step();
    Mat a(2, 3);
    a.row(0) = (common - 0.5 * stretch * chord).transpose();
    a.row(1) = (common + 0.5 * stretch * chord).transpose();
    return a;
  }

  // Caps the speed and keeps the anchor strictly inside the workspace.
  Eigen::RowVector3d keep_inside(const Vec3& anchor, Eigen::RowVector3d u) const {
    const double cap = 0.9 * spec_.max_step();
    if (u.norm() > cap) u *= cap / u.norm();
    const Workspace& ws = spec_.workspace;
    const double m = 0.02;
    u(0) = std::clamp(anchor.x() + u(0), ws.x_min + m, ws.x_max - m) - anchor.x();
    u(1) = std::clamp(anchor.y() + u(1), ws.y_min + m, ws.y_max - m) - anchor.y();
    if (u(2) != 0.0) u(2) = std::clamp(anchor.z() + u(2), 0.0, ws.z_max - m) - anchor.z();
    return u;
  }

  const TaskSpec& spec_;
  Rng rng_;
  bool started_ = false;
  double heading_ = 0.0;
  double speed_ = 0.0;
  int phase_ = 0;
  int lift_steps_ = 0;
  int hold_ = 0;
  double z_target_ = 0.0;
};

}  // namespace

EpisodeRecord generate_episode_record(const TaskSpec& spec, int horizon, std::uint64_t seed) {
  if (horizon < 2) throw InvalidInput("generate_episode: horizon must be at least 2");
  SceneState scene = create_scene(spec, derive_seed(seed, 0));
  TrajectorySampler sampler(spec, derive_seed(seed, 1));
  std::vector<SceneState> states{scene};
  EpisodeRecord rec;
  for (int t = 1; t < horizon; ++t) {
    Mat a = sampler.next(scene);
    if (spec.task == TaskId::kRopeSweep) {
      // Shrink the stretch component until the rope can span the grippers.
      const double length = spec.rope_segment * (scene.rope.count - 1);
      const double span = (scene.anchors[0] - scene.anchors[1]).norm();
      for (int k = 0; k < 20; ++k) {
        const Vec3 n0 = scene.anchors[0] + a.row(0).transpose(), n1 = scene.anchors[1] + a.row(1).transpose();
        if ((n0 - n1).norm() <= std::max(0.9 * length, span)) break;
        const Eigen::RowVector3d mean = 0.5 * (a.row(0) + a.row(1));
        a.row(0) = mean + 0.5 * (a.row(0) - mean);
        a.row(1) = mean + 0.5 * (a.row(1) - mean);
        if (k == 19) a.setZero();
      }
    }
    rec.group_actions.push_back(a);
    scene = step(scene, expand_action(scene, a), spec);
    states.push_back(scene);
  }
  rec.episode = record_episode(states);
  return rec;
}

Episode generate_episode(const TaskSpec& spec, int horizon, std::uint64_t seed) {
  return generate_episode_record(spec, horizon, seed).episode;
}

Dataset generate_dataset(const TaskSpec& spec, int episodes, int horizon, std::uint64_t seed) {
  if (episodes < 1) throw InvalidInput("generate_dataset: episodes must be at least 1");
  Dataset ds;
  ds.spec = spec;
  for (int e = 0; e < episodes; ++e) {
    ds.episodes.push_back(generate_episode(spec, horizon, derive_seed(seed, static_cast<std::uint64_t>(e))));
  }
  return ds;
}

}  // namespace pformer
