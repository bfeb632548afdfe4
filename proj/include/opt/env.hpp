#ifndef OPT_ENV_HPP
#define OPT_ENV_HPP

// Multi-task Predator-Prey grid world. Agents (predators) move, stop or
// capture; prey wander randomly; obstacles block movement. A prey is captured
// when the summed attack capability of the adjacent agents choosing "capture"
// reaches its defense capability. Tasks differ in scale (agent, prey and
// obstacle counts) and capabilities, and are drawn from a training split or
// one of three unseen splits.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "opt/error.hpp"
#include "opt/numerics.hpp"
#include "opt/params.hpp"

namespace opt::env {

enum class Split { train, unseen_capability, unseen_scale, unseen_both };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::unseen_capability: return "unseen_capability";
    case Split::unseen_scale: return "unseen_scale";
    case Split::unseen_both: return "unseen_both";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  for (Split v : {Split::train, Split::unseen_capability, Split::unseen_scale, Split::unseen_both}) {
    if (s == to_string(v)) return v;
  }
  return std::nullopt;
}

/// Closed integer interval [lo, hi].
struct IntRange {
  int lo = 0;
  int hi = 0;

  bool empty() const { return hi < lo; }
  bool contains(int v) const { return lo <= v && v <= hi; }
  bool overlaps(const IntRange& o) const { return !empty() && !o.empty() && lo <= o.hi && o.lo <= hi; }
  int sample(Rng& rng) const {
    if (empty()) throw config_error("cannot sample from an empty range");
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  }
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct RewardTable {
  double capture = 10.0;
  double win = 50.0;
  double step = -0.05;
  friend bool operator==(const RewardTable&, const RewardTable&) = default;
};

/// Parameter ranges of a scenario family, per split.
struct ScenarioFamily {
  int grid_w = 7;
  int grid_h = 7;
  int sight_range = 3;
  int horizon = 20;
  RewardTable reward;
  /// Redraw capabilities until the team's total attack reaches every prey's defense.
  bool require_feasible = true;

  IntRange n_agents{2, 3};
  IntRange n_prey{2, 3};
  IntRange n_obstacles{0, 2};
  IntRange attack{1, 2};
  IntRange defense{1, 3};

  IntRange unseen_n_agents{4, 4};
  IntRange unseen_n_prey{4, 4};
  /// Capability values never seen in training; mixed into both attack and defense draws.
  IntRange unseen_capability{4, 4};

  int max_agents() const { return std::max(n_agents.hi, unseen_n_agents.hi); }
  int max_prey() const { return std::max(n_prey.hi, unseen_n_prey.hi); }
  int max_entities() const { return max_agents() + max_prey() + n_obstacles.hi; }

  /// Throws config_error on empty or overlapping train/unseen ranges.
  void validate() const {
    auto nonempty = [](const IntRange& r, const char* name) {
      if (r.empty()) throw config_error(std::string("empty range for ") + name);
    };
    nonempty(n_agents, "n_agents");
    nonempty(n_prey, "n_prey");
    nonempty(n_obstacles, "n_obstacles");
    nonempty(attack, "attack");
    nonempty(defense, "defense");
    nonempty(unseen_n_agents, "unseen_n_agents");
    nonempty(unseen_n_prey, "unseen_n_prey");
    nonempty(unseen_capability, "unseen_capability");
    if (n_agents.lo < 1 || n_prey.lo < 1 || n_obstacles.lo < 0 || attack.lo < 1 || defense.lo < 1 ||
        unseen_capability.lo < 1 || unseen_n_agents.lo < 1 || unseen_n_prey.lo < 1) {
      throw config_error("scenario ranges violate N_a>=1, N_p>=1, N_o>=0, capabilities>=1");
    }
    if (unseen_n_agents.overlaps(n_agents)) throw config_error("unseen_n_agents overlaps the training range");
    if (unseen_n_prey.overlaps(n_prey)) throw config_error("unseen_n_prey overlaps the training range");
    if (unseen_capability.overlaps(attack) || unseen_capability.overlaps(defense)) {
      throw config_error("unseen_capability overlaps a training capability range");
    }
    if (grid_w < 1 || grid_h < 1 || sight_range < 1 || horizon < 1) throw config_error("invalid grid geometry (sight_range must be at least 1)");
    if (max_entities() > grid_w * grid_h) throw config_error("grid too small for the largest task");
  }

  friend bool operator==(const ScenarioFamily&, const ScenarioFamily&) = default;
};

struct TaskSpec {
  int grid_w = 7;
  int grid_h = 7;
  int n_agents = 2;
  int n_prey = 1;
  int n_obstacles = 0;
  std::vector<int> attack_caps;   // one per agent
  std::vector<int> defense_caps;  // one per prey
  int sight_range = 3;
  int horizon = 20;

  int entity_count() const { return n_agents + n_prey + n_obstacles; }
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

namespace detail {

inline std::vector<int> capability_pool(const IntRange& train, const IntRange& extra) {
  std::vector<int> v;
  for (int c = train.lo; c <= train.hi; ++c) v.push_back(c);
  for (int c = extra.lo; c <= extra.hi; ++c) {
    if (std::find(v.begin(), v.end(), c) == v.end()) v.push_back(c);
  }
  return v;
}

inline int pick(const std::vector<int>& pool, Rng& rng) {
  return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
}

}  // namespace detail

/// True when the whole team together can capture the strongest prey.
inline bool feasible(const TaskSpec& t) {
  int attack = 0;
  for (int c : t.attack_caps) attack += c;
  for (int d : t.defense_caps) {
    if (attack < d) return false;
  }
  return true;
}

/// Draws a task. Unseen-capability splits resample until at least one
/// capability lies outside both training capability ranges. With
/// `require_feasible` capabilities are redrawn until the task is winnable.
inline TaskSpec sample_task(Split split, const ScenarioFamily& family, Rng& rng) {
  family.validate();
  TaskSpec t;
  t.grid_w = family.grid_w;
  t.grid_h = family.grid_h;
  t.sight_range = family.sight_range;
  t.horizon = family.horizon;
  const bool unseen_scale = split == Split::unseen_scale || split == Split::unseen_both;
  const bool unseen_cap = split == Split::unseen_capability || split == Split::unseen_both;
  t.n_agents = (unseen_scale ? family.unseen_n_agents : family.n_agents).sample(rng);
  t.n_prey = (unseen_scale ? family.unseen_n_prey : family.n_prey).sample(rng);
  t.n_obstacles = family.n_obstacles.sample(rng);
  const auto attack_pool = unseen_cap ? detail::capability_pool(family.attack, family.unseen_capability)
                                      : detail::capability_pool(family.attack, {1, 0});
  const auto defense_pool = unseen_cap ? detail::capability_pool(family.defense, family.unseen_capability)
                                       : detail::capability_pool(family.defense, {1, 0});
  auto unseen = [&](int c) { return !family.attack.contains(c) && !family.defense.contains(c); };
  while (true) {
    t.attack_caps.clear();
    t.defense_caps.clear();
    for (int i = 0; i < t.n_agents; ++i) t.attack_caps.push_back(detail::pick(attack_pool, rng));
    for (int i = 0; i < t.n_prey; ++i) t.defense_caps.push_back(detail::pick(defense_pool, rng));
    if (unseen_cap && std::none_of(t.attack_caps.begin(), t.attack_caps.end(), unseen) &&
        std::none_of(t.defense_caps.begin(), t.defense_caps.end(), unseen)) {
      continue;
    }
    if (family.require_feasible && !feasible(t)) continue;
    return t;
  }
}

// ---------------------------------------------------------------------------
// World

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

inline int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

enum Action : int { up = 0, down = 1, left = 2, right = 3, stop = 4, capture = 5 };
inline constexpr int kActionCount = 6;

/// Per-entity observation row: relative x, relative y (both divided by the
/// sight range), type one-hot (agent, prey, obstacle), capability, is-self,
/// visible.
inline constexpr int kObsFeatures = 8;
/// Per-entity state row: x, y (normalised to [0,1]), type one-hot, capability, alive.
inline constexpr int kStateFeatures = 7;

struct WorldState {
  std::vector<Cell> agents;
  std::vector<Cell> prey;
  std::vector<Cell> obstacles;
  std::vector<bool> prey_alive;
  int step = 0;
  bool done = false;
  bool win = false;

  int prey_remaining() const { return static_cast<int>(std::count(prey_alive.begin(), prey_alive.end(), true)); }
  friend bool operator==(const WorldState&, const WorldState&) = default;
};

struct Observation {
  Matrix entity_features;  // M_max x kObsFeatures
  Mask visibility_mask;    // M_max
  Mask available_actions;  // kActionCount
  int self_index = 0;      // row of the observing agent
};

struct GlobalState {
  Matrix entity_features;  // M_max x kStateFeatures
  Mask entity_mask;
};

struct StepResult {
  std::vector<Observation> observations;
  double reward = 0.0;
  bool done = false;
  bool win = false;
  int captures = 0;
};

/// True iff the summed attack capability reaches the prey's defense.
inline bool capture_rule(std::span<const int> attacker_caps, int prey_defense) {
  if (attacker_caps.empty()) return false;
  int total = 0;
  for (int c : attacker_caps) total += c;
  return total >= prey_defense;
}

namespace detail {

inline bool in_bounds(const TaskSpec& t, Cell c) { return c.x >= 0 && c.y >= 0 && c.x < t.grid_w && c.y < t.grid_h; }

inline bool occupied(const WorldState& s, Cell c) {
  for (const auto& o : s.obstacles) {
    if (o == c) return true;
  }
  for (const auto& a : s.agents) {
    if (a == c) return true;
  }
  for (std::size_t p = 0; p < s.prey.size(); ++p) {
    if (s.prey_alive[p] && s.prey[p] == c) return true;
  }
  return false;
}

inline Cell moved(Cell c, int action) {
  switch (action) {
    case up: return {c.x, c.y - 1};
    case down: return {c.x, c.y + 1};
    case left: return {c.x - 1, c.y};
    case right: return {c.x + 1, c.y};
    default: return c;
  }
}

}  // namespace detail

/// Places every entity on a distinct uniformly random cell.
inline WorldState reset(const TaskSpec& task, Rng& rng) {
  const int cells = task.grid_w * task.grid_h;
  if (task.n_agents < 1 || task.n_prey < 1 || task.n_obstacles < 0) throw config_error("invalid task scale");
  if (static_cast<int>(task.attack_caps.size()) != task.n_agents ||
      static_cast<int>(task.defense_caps.size()) != task.n_prey) {
    throw config_error("capability lists do not match the task scale");
  }
  if (task.entity_count() > cells) throw config_error("grid too small to place every entity");
  // Partial Fisher-Yates over cell indices.
  std::vector<int> idx(static_cast<std::size_t>(cells));
  for (int i = 0; i < cells; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < task.entity_count(); ++i) {
    const int j = std::uniform_int_distribution<int>(i, cells - 1)(rng);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  WorldState s;
  int k = 0;
  auto next = [&]() {
    const int c = idx[static_cast<std::size_t>(k++)];
    return Cell{c % task.grid_w, c / task.grid_w};
  };
  for (int i = 0; i < task.n_agents; ++i) s.agents.push_back(next());
  for (int i = 0; i < task.n_prey; ++i) s.prey.push_back(next());
  for (int i = 0; i < task.n_obstacles; ++i) s.obstacles.push_back(next());
  s.prey_alive.assign(static_cast<std::size_t>(task.n_prey), true);
  return s;
}

/// Capture is available iff a live prey is Chebyshev-adjacent (always visible
/// since the sight range is at least one).
inline bool capture_available(const WorldState& s, int agent) {
  for (std::size_t p = 0; p < s.prey.size(); ++p) {
    if (s.prey_alive[p] && chebyshev(s.agents[static_cast<std::size_t>(agent)], s.prey[p]) == 1) return true;
  }
  return false;
}

/// Partial observation of `agent`, padded to `max_entities` rows. Row order:
/// agents, prey, obstacles, padding.
inline Observation observe(const TaskSpec& task, const WorldState& s, int agent, int max_entities) {
  if (agent < 0 || agent >= task.n_agents) throw invalid_input("observe: agent index out of range");
  if (task.entity_count() > max_entities) throw invalid_input("observe: task exceeds the padding bound");
  Observation o;
  o.entity_features = Matrix::Zero(max_entities, kObsFeatures);
  o.visibility_mask = Mask::Constant(max_entities, false);
  o.self_index = agent;
  const Cell self = s.agents[static_cast<std::size_t>(agent)];
  const double range = std::max(task.sight_range, 1);
  auto fill = [&](int row, Cell c, int type, int cap, bool alive) {
    if (!alive || chebyshev(self, c) > task.sight_range) return;
    auto f = o.entity_features.row(row);
    f(0) = (c.x - self.x) / range;
    f(1) = (c.y - self.y) / range;
    f(2 + type) = 1.0;
    f(5) = cap;
    f(6) = row == agent ? 1.0 : 0.0;
    f(7) = 1.0;
    o.visibility_mask[row] = true;
  };
  int row = 0;
  for (int i = 0; i < task.n_agents; ++i, ++row) fill(row, s.agents[static_cast<std::size_t>(i)], 0, task.attack_caps[static_cast<std::size_t>(i)], true);
  for (int i = 0; i < task.n_prey; ++i, ++row) {
    fill(row, s.prey[static_cast<std::size_t>(i)], 1, task.defense_caps[static_cast<std::size_t>(i)], s.prey_alive[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < task.n_obstacles; ++i, ++row) fill(row, s.obstacles[static_cast<std::size_t>(i)], 2, 0, true);
  o.available_actions = Mask::Constant(kActionCount, true);
  o.available_actions[capture] = capture_available(s, agent);
  return o;
}

/// Fully observed state, padded to `max_entities` rows; captured prey masked.
inline GlobalState global_state(const TaskSpec& task, const WorldState& s, int max_entities) {
  if (task.entity_count() > max_entities) throw invalid_input("global_state: task exceeds the padding bound");
  GlobalState g;
  g.entity_features = Matrix::Zero(max_entities, kStateFeatures);
  g.entity_mask = Mask::Constant(max_entities, false);
  const double sx = std::max(task.grid_w - 1, 1), sy = std::max(task.grid_h - 1, 1);
  auto fill = [&](int row, Cell c, int type, int cap, bool alive) {
    if (!alive) return;
    auto f = g.entity_features.row(row);
    f(0) = c.x / sx;
    f(1) = c.y / sy;
    f(2 + type) = 1.0;
    f(5) = cap;
    f(6) = 1.0;
    g.entity_mask[row] = true;
  };
  int row = 0;
  for (int i = 0; i < task.n_agents; ++i, ++row) fill(row, s.agents[static_cast<std::size_t>(i)], 0, task.attack_caps[static_cast<std::size_t>(i)], true);
  for (int i = 0; i < task.n_prey; ++i, ++row) {
    fill(row, s.prey[static_cast<std::size_t>(i)], 1, task.defense_caps[static_cast<std::size_t>(i)], s.prey_alive[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < task.n_obstacles; ++i, ++row) fill(row, s.obstacles[static_cast<std::size_t>(i)], 2, 0, true);
  return g;
}

/// Advances the world by one step. Agents move in ascending index order
/// (blocked moves become stop), captures resolve per live prey, then each
/// surviving prey moves to a uniformly chosen free neighbour or stays.
/// Returns the number of prey captured this step.
inline int advance(const TaskSpec& task, WorldState& s, std::span<const int> joint_action, Rng& rng) {
  if (s.done) throw invalid_state("step called on a finished episode");
  if (static_cast<int>(joint_action.size()) != task.n_agents) throw invalid_input("step: one action per agent required");
  for (int a : joint_action) {
    if (a < 0 || a >= kActionCount) throw invalid_input("step: action out of range");
  }
  for (int i = 0; i < task.n_agents; ++i) {
    const int a = joint_action[static_cast<std::size_t>(i)];
    if (a > right) continue;
    const Cell target = detail::moved(s.agents[static_cast<std::size_t>(i)], a);
    if (detail::in_bounds(task, target) && !detail::occupied(s, target)) s.agents[static_cast<std::size_t>(i)] = target;
  }
  int captures = 0;
  std::vector<int> caps;
  for (int p = 0; p < task.n_prey; ++p) {
    if (!s.prey_alive[static_cast<std::size_t>(p)]) continue;
    caps.clear();
    for (int i = 0; i < task.n_agents; ++i) {
      if (joint_action[static_cast<std::size_t>(i)] == capture &&
          chebyshev(s.agents[static_cast<std::size_t>(i)], s.prey[static_cast<std::size_t>(p)]) == 1) {
        caps.push_back(task.attack_caps[static_cast<std::size_t>(i)]);
      }
    }
    if (capture_rule(caps, task.defense_caps[static_cast<std::size_t>(p)])) {
      s.prey_alive[static_cast<std::size_t>(p)] = false;
      ++captures;
    }
  }
  std::vector<Cell> options;
  for (int p = 0; p < task.n_prey; ++p) {
    if (!s.prey_alive[static_cast<std::size_t>(p)]) continue;
    const Cell here = s.prey[static_cast<std::size_t>(p)];
    options.assign(1, here);
    for (int a : {up, down, left, right}) {
      const Cell c = detail::moved(here, a);
      if (detail::in_bounds(task, c) && !detail::occupied(s, c)) options.push_back(c);
    }
    s.prey[static_cast<std::size_t>(p)] = options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
  }
  ++s.step;
  s.win = s.prey_remaining() == 0;
  s.done = s.win || s.step >= task.horizon;
  return captures;
}

inline double step_reward(const RewardTable& table, int captures, bool win) {
  return table.step + table.capture * captures + (win ? table.win : 0.0);
}

/// Single-owner environment instance bundling task, world and random stream.
class PredatorPrey {
 public:
  PredatorPrey(ScenarioFamily family, std::uint64_t seed) : family_(std::move(family)), rng_(seed) {
    family_.validate();
  }

  /// Samples a task from `split` and resets onto it.
  std::vector<Observation> reset(Split split) { return reset(sample_task(split, family_, rng_)); }

  std::vector<Observation> reset(TaskSpec task) {
    task_ = std::move(task);
    state_ = env::reset(task_, rng_);
    return observations();
  }

  StepResult step(std::span<const int> joint_action) {
    StepResult r;
    r.captures = advance(task_, state_, joint_action, rng_);
    r.done = state_.done;
    r.win = state_.win;
    r.reward = step_reward(family_.reward, r.captures, r.win);
    r.observations = observations();
    return r;
  }

  std::vector<Observation> observations() const {
    std::vector<Observation> out;
    for (int a = 0; a < task_.n_agents; ++a) out.push_back(observe(task_, state_, a, family_.max_entities()));
    return out;
  }
  GlobalState state() const { return global_state(task_, state_, family_.max_entities()); }

  const TaskSpec& task() const { return task_; }
  const WorldState& world() const { return state_; }
  const ScenarioFamily& family() const { return family_; }
  Rng& rng() { return rng_; }

 private:
  ScenarioFamily family_;
  Rng rng_;
  TaskSpec task_;
  WorldState state_;
};

}  // namespace opt::env

#endif  // OPT_ENV_HPP
