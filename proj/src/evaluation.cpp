#include "epc/evaluation.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace epc {

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EPC_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

namespace {

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

DescriptorTable assemble(const std::vector<std::uint64_t>& ids, const std::vector<std::vector<float>>& rows) {
  DescriptorTable table;
  for (std::size_t i = 0; i < ids.size(); ++i) table.append(ids[i], rows[i]);
  return table;
}

}  // namespace

DescriptorTable build_descriptor_db(EpcModel<float>& model, const SubmapIndex& index, Split split,
                                    std::size_t threads) {
  std::vector<const SubmapRecord*> records;
  for (const auto& r : index.records) {
    if (r.split == split) records.push_back(&r);
  }
  std::vector<std::uint64_t> ids;
  for (const auto* r : records) ids.push_back(r->id);
  std::vector<std::vector<float>> rows(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const PointCloud cloud = load_submap(index, *records[i]);
    try {
      rows[i] = model.describe(cloud);
    } catch (const std::exception& e) {
      throw std::runtime_error("submap " + std::to_string(records[i]->id) + ": " + e.what());
    }
  });
  return assemble(ids, rows);
}

DescriptorTable build_descriptor_db(EpcModel<float>& model, const Dataset& data, Split split, std::size_t threads) {
  std::vector<std::size_t> positions;
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; i < data.index().records.size(); ++i) {
    if (data.index().records[i].split == split) {
      positions.push_back(i);
      ids.push_back(data.index().records[i].id);
    }
  }
  std::vector<std::vector<float>> rows(positions.size());
  parallel_for(positions.size(), threads,
               [&](std::size_t i) { rows[i] = model.describe(data.clouds()[positions[i]]); });
  return assemble(ids, rows);
}

std::size_t one_percent_k(std::size_t database_count) {
  return std::max<std::size_t>(1, (database_count + 50) / 100);
}

EvalReport evaluate(const DescriptorTable& database, const DescriptorTable& queries, const SubmapIndex& index,
                    std::span<const std::size_t> ks, double success_radius) {
  if (database.count() == 0) throw std::invalid_argument("evaluate: empty database");
  if (queries.count() > 0 && queries.dim != database.dim) {
    throw std::invalid_argument("evaluate: query dimension " + std::to_string(queries.dim) +
                                " != database dimension " + std::to_string(database.dim));
  }
  const std::unordered_set<std::uint64_t> db_ids(database.ids.begin(), database.ids.end());
  for (std::uint64_t q : queries.ids) {
    if (db_ids.count(q)) throw std::invalid_argument("evaluate: query id " + std::to_string(q) + " is also in the database");
  }
  std::unordered_map<std::uint64_t, const SubmapRecord*> records;
  for (const auto& r : index.records) records.emplace(r.id, &r);
  auto record = [&](std::uint64_t id) {
    const auto it = records.find(id);
    if (it == records.end()) throw std::invalid_argument("evaluate: id " + std::to_string(id) + " not in index");
    return it->second;
  };

  EvalReport report;
  report.query_count = queries.count();
  report.database_count = database.count();
  report.success_radius = success_radius;
  report.one_percent_k = one_percent_k(database.count());

  std::vector<std::size_t> first_hit(queries.count(), database.count());  // rank of the first true match
  std::vector<std::size_t> order(database.count());
  std::vector<double> dist(database.count());
  for (std::size_t q = 0; q < queries.count(); ++q) {
    const auto qd = queries.row(q);
    for (std::size_t i = 0; i < database.count(); ++i) {
      const auto dd = database.row(i);
      double s = 0.0;
      for (std::size_t c = 0; c < database.dim; ++c) {
        const double diff = double(qd[c]) - double(dd[c]);
        s += diff * diff;
      }
      dist[i] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dist[a] < dist[b] || (dist[a] == dist[b] && database.ids[a] < database.ids[b]);
    });
    const SubmapRecord* qr = record(queries.ids[q]);
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      if (world_distance(*qr, *record(database.ids[order[rank]])) <= success_radius) {
        first_hit[q] = rank;
        break;
      }
    }
  }
  auto recall = [&](std::size_t k) {
    if (queries.count() == 0) return 0.0;
    const auto hits = std::count_if(first_hit.begin(), first_hit.end(), [&](std::size_t r) { return r < k; });
    return static_cast<double>(hits) / static_cast<double>(queries.count());
  };
  for (std::size_t k : ks) {
    if (k == 0) throw std::invalid_argument("evaluate: K must be >= 1");
    report.recall_at[k] = recall(k);
  }
  report.recall_at_one_percent = recall(report.one_percent_k);
  return report;
}

std::string to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json recall = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.recall_at) recall[std::to_string(k)] = v;
  j["recall_at"] = recall;
  j["recall_at_one_percent"] = report.recall_at_one_percent;
  j["one_percent_k"] = report.one_percent_k;
  j["query_count"] = report.query_count;
  j["database_count"] = report.database_count;
  j["success_radius"] = report.success_radius;
  return j.dump(2);
}

}  // namespace epc
