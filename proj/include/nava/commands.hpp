#pragma once

#include "nava/runconfig.hpp"

namespace nava {

int cmd_gen_data(const RunConfig& rc);
int cmd_train(const RunConfig& rc);
int cmd_sample(const RunConfig& rc);
int cmd_eval(const RunConfig& rc);
int cmd_ablate(const RunConfig& rc);

}  // namespace nava
