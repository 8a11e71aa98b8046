// Minimal tuner usage: TPE vs random search on a discretized quadratic.

#include <iostream>

#include "r3/tuner.hpp"

int main() {
  r3::TuneSpace space;
  space.params = {r3::ParamDef::int_range("x", 1, 64, 1)};

  auto evaluate = [](const r3::TunePoint& p) {
    double x = static_cast<double>(std::get<int64_t>(p.assignment.at("x")));
    return r3::Trial::success(p, (x - 20) * (x - 20) + 1.0);
  };

  r3::TuneResult tpe = r3::tune(space, evaluate, 30, 1, 42);
  r3::TuneResult rnd = r3::random_search(space, evaluate, 30, 42);

  std::cout << "tpe  best: " << *tpe.best_runtime_s << " at "
            << r3::tune_point_to_json(space, *tpe.best_point).dump() << "\n";
  std::cout << "rand best: " << *rnd.best_runtime_s << " at "
            << r3::tune_point_to_json(space, *rnd.best_point).dump() << "\n";
  return 0;
}
