#pragma once

#include <vector>

#include "masa/checkpoint.hpp"
#include "masa/image.hpp"
#include "masa/scene.hpp"

namespace masa::cli {

// Log-scale loss curve: raw points plus a moving average.
Image plot_loss_curve(const std::vector<LossPoint>& losses, int width = 480, int height = 240);

}  // namespace masa::cli
