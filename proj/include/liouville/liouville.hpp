#pragma once

// Convenience header pulling in the whole library.

#include "config.hpp"
#include "density_net.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "loss.hpp"
#include "systems.hpp"
#include "training.hpp"
#include "validation.hpp"
