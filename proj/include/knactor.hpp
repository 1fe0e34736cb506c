#pragma once

// Umbrella header: the whole toolkit in one include.

#include "knactor/access.hpp"
#include "knactor/apps/retail.hpp"
#include "knactor/apps/smarthome.hpp"
#include "knactor/apps/tasks.hpp"
#include "knactor/baseline.hpp"
#include "knactor/bench.hpp"
#include "knactor/cast.hpp"
#include "knactor/dataflow.hpp"
#include "knactor/dx_client.hpp"
#include "knactor/dx_server.hpp"
#include "knactor/dxg.hpp"
#include "knactor/errors.hpp"
#include "knactor/expr.hpp"
#include "knactor/log_store.hpp"
#include "knactor/object_store.hpp"
#include "knactor/reconciler.hpp"
#include "knactor/schema.hpp"
#include "knactor/sync.hpp"
#include "knactor/trace.hpp"
#include "knactor/value.hpp"
#include "knactor/wire.hpp"
