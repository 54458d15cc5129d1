#pragma once

// Descriptor databases and recall@K retrieval evaluation.

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "epc/dataset.hpp"
#include "epc/models.hpp"

namespace epc {

/// Worker count from EPC_THREADS (default: hardware concurrency, at least 1).
std::size_t worker_threads();

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every step. Call once at process start; no-op off glibc.
void tune_allocator();

/// One inference-mode descriptor per record of `split`, in index order.
/// Reads point files from disk; an unreadable submap aborts with its id.
DescriptorTable build_descriptor_db(EpcModel<float>& model, const SubmapIndex& index, Split split,
                                    std::size_t threads = worker_threads());

/// In-memory variant over an already loaded dataset.
DescriptorTable build_descriptor_db(EpcModel<float>& model, const Dataset& data, Split split,
                                    std::size_t threads = worker_threads());

struct EvalReport {
  std::map<std::size_t, double> recall_at;
  double recall_at_one_percent = 0.0;
  std::size_t one_percent_k = 1;
  std::size_t query_count = 0;
  std::size_t database_count = 0;
  double success_radius = 25.0;
};

/// K for recall@1%: 1% of the database rounded half up, at least 1.
std::size_t one_percent_k(std::size_t database_count);

/// Ranks the database for each query by squared descriptor distance (ties to
/// the lower id); a query succeeds at K when one of its top K lies within
/// `success_radius` meters of it. Every query counts toward the denominator.
EvalReport evaluate(const DescriptorTable& database, const DescriptorTable& queries, const SubmapIndex& index,
                    std::span<const std::size_t> ks, double success_radius = 25.0);

std::string to_json(const EvalReport& report);

}  // namespace epc
