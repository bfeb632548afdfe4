#ifndef OPT_TESTS_TINY_CONFIG_HPP
#define OPT_TESTS_TINY_CONFIG_HPP

#include "opt/config.hpp"

namespace opt::fixtures {

/// A run small enough to train for a few hundred steps inside a unit test.
inline RunConfig tiny_config(std::uint64_t seed = 7) {
  RunConfig c;
  c.model.n_layers = 1;
  c.model.n_prototypes = 2;
  c.model.d_x = 6;
  c.model.d_h = 5;
  c.model.d_ff = 5;
  c.model.d_mix = 4;
  c.train.batch = 2;
  c.train.buffer = 6;
  c.train.target_interval = 3;
  c.train.epsilon_anneal = 100;
  c.train.total_steps = 60;
  c.train.eval_interval = 20;
  c.train.eval_episodes = 3;
  c.train.checkpoint_interval = 40;
  c.train.seed = seed;
  c.env.grid_w = c.env.grid_h = 4;
  c.env.sight_range = 2;
  c.env.horizon = 5;
  c.env.n_agents = {2, 2};
  c.env.n_prey = {1, 1};
  c.env.n_obstacles = {0, 0};
  c.env.attack = {1, 1};
  c.env.defense = {1, 1};
  c.env.unseen_n_agents = {3, 3};
  c.env.unseen_n_prey = {2, 2};
  c.env.unseen_capability = {2, 2};
  return c;
}

}  // namespace opt::fixtures

#endif  // OPT_TESTS_TINY_CONFIG_HPP
