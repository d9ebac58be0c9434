#pragma once

#include "protoxplain/backbone.hpp"
#include "protoxplain/dataio.hpp"
#include "protoxplain/episodic.hpp"
#include "protoxplain/evalrep.hpp"
#include "protoxplain/explain.hpp"
#include "protoxplain/image_io.hpp"
#include "protoxplain/keyvalue.hpp"
#include "protoxplain/manifest.hpp"
#include "protoxplain/protohead.hpp"
#include "protoxplain/render.hpp"
#include "protoxplain/synthgen.hpp"
#include "protoxplain/tensor.hpp"
#include "protoxplain/trainer.hpp"
