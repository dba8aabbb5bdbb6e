#pragma once

#include "saferedir/config.hpp"
#include "saferedir/dataset.hpp"
#include "saferedir/encoders.hpp"
#include "saferedir/errors.hpp"
#include "saferedir/fusion.hpp"
#include "saferedir/heads.hpp"
#include "saferedir/inference.hpp"
#include "saferedir/losses.hpp"
#include "saferedir/model.hpp"
#include "saferedir/numerics/array.hpp"
#include "saferedir/numerics/autodiff.hpp"
#include "saferedir/numerics/grad_check.hpp"
#include "saferedir/numerics/rng.hpp"
#include "saferedir/redirection.hpp"
#include "saferedir/training.hpp"
#include "saferedir/verify.hpp"
