#pragma once

#include "sinebeta/carousel.hpp"
#include "sinebeta/distributions.hpp"
#include "sinebeta/ensemble.hpp"
#include "sinebeta/hyperbolic.hpp"
#include "sinebeta/mcharness.hpp"
#include "sinebeta/pointstats.hpp"
#include "sinebeta/rng.hpp"
#include "sinebeta/selftest.hpp"
