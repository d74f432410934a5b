#pragma once

#include <advpatch/bench.hpp>
#include <advpatch/classical.hpp>
#include <advpatch/error.hpp>
#include <advpatch/features.hpp>
#include <advpatch/geometry.hpp>
#include <advpatch/image.hpp>
#include <advpatch/maskgen.hpp>
#include <advpatch/matching.hpp>
#include <advpatch/patchgen.hpp>
#include <advpatch/spnet.hpp>
