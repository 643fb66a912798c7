#pragma once

#include "run_context.hpp"

namespace chopgrad::cli {

int cmd_gradcheck(const RunContext& ctx);
int cmd_locality(const RunContext& ctx);
int cmd_grad_error(const RunContext& ctx);
int cmd_param_compare(const RunContext& ctx);
int cmd_profile(const RunContext& ctx);
int cmd_spatial_probe(const RunContext& ctx);
int cmd_train_toy(const RunContext& ctx);

}  // namespace chopgrad::cli
