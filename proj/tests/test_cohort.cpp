#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "cdssl/cohort.hpp"
#include "cdssl/common.hpp"
#include "test_util.hpp"

using cdssl::SchemaError;
using namespace cdssl::cohort;

namespace {

SubjectRecord make_record(const std::string& id, const std::string& study, std::optional<double> y = 5.0,
                          std::optional<int> mmse = 25, std::optional<bool> amy = true,
                          std::optional<Stage> stage = Stage::prodromal) {
  SubjectRecord r;
  r.subject_id = id;
  r.study = study;
  r.image_ref = "volumes/" + id + ".cdvl";
  r.cdr_sb_baseline = 2.0;
  r.cdr_sb_month12 = y;
  r.mmse = mmse;
  r.amyloid_positive = amy;
  r.stage = stage;
  return r;
}

DatasetManifest pool_manifest(int ssl_only, int finetune) {
  DatasetManifest m;
  m.study_roles["U"] = {true, false, false, false};
  m.study_roles["F"] = {false, true, true, false};
  for (int i = 0; i < ssl_only; ++i) m.records.push_back(make_record("U" + std::to_string(1000 + i), "U", std::nullopt));
  for (int i = 0; i < finetune; ++i)
    m.records.push_back(make_record("F" + std::to_string(1000 + i), "F", 0.15 * (i % 100)));
  return m;
}

std::filesystem::path write_lines(const std::string& name, const std::vector<std::string>& lines) {
  const auto dir = testutil::scratch("cohort");
  const auto path = dir / name;
  std::ofstream out(path);
  for (const auto& l : lines) out << l << "\n";
  return path;
}

std::string line_of(const SubjectRecord& r) { return record_to_json(r).dump(); }

}  // namespace

TEST_CASE("manifest round trip and schema errors") {
  const auto a = make_record("s1", "X"), b = make_record("s2", "X", std::nullopt), c = make_record("s3", "X");
  const auto path = write_lines("ok.jsonl", {line_of(a), line_of(b), line_of(c)});
  const auto m = load_manifest(path);
  CHECK(m.records.size() == 3);
  CHECK(m.records[1] == b);

  auto bad = make_record("s4", "X");
  nlohmann::json j = record_to_json(bad);
  j["cdr_sb_month12"] = 19;
  try {
    load_manifest(write_lines("bad.jsonl", {line_of(a), j.dump()}));
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(e.field() == "cdr_sb_month12");
    CHECK(e.line() == 2);
  }

  try {
    load_manifest(write_lines("dup.jsonl", {line_of(a), line_of(a)}));
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("s1") != std::string::npos);
  }

  nlohmann::json extra = record_to_json(a);
  extra["age"] = 70;
  CHECK_THROWS_AS(load_manifest(write_lines("extra.jsonl", {extra.dump()})), SchemaError);

  DatasetManifest with_roles = pool_manifest(3, 4);
  const auto rpath = testutil::scratch("cohort_roles") / "m.jsonl";
  save_manifest(with_roles, rpath);
  CHECK(load_manifest(rpath) == with_roles);
}

TEST_CASE("cohort filter") {
  DatasetManifest m;
  m.records = {make_record("keep", "X", 3.0, 21, true, Stage::prodromal),
               make_record("mmse20", "X", 3.0, 20, true, Stage::mild),
               make_record("nommse", "X", 3.0, std::nullopt, true, Stage::mild),
               make_record("neg", "X", 3.0, 28, false, Stage::mild),
               make_record("other", "X", 3.0, 28, true, Stage::other)};
  FilterReport rep;
  const auto f = filter_cohort(m, &rep);
  REQUIRE(f.records.size() == 1);
  CHECK(f.records[0].subject_id == "keep");
  CHECK(rep.input == 5);
  CHECK(rep.retained == 1);
  CHECK(rep.missing_field == 1);
  CHECK(rep.failed_criteria == 3);
  CHECK(filter_cohort(f) == f);  // idempotent
}

TEST_CASE("split proportions") {
  const auto m = pool_manifest(100, 100);
  const auto s = build_splits(m, {}, 5);
  CHECK(s.ssl_train.size() == 90);
  CHECK(s.ssl_val.size() == 10);
  CHECK(s.ft_test_in_study.size() == 30);
  REQUIRE(s.ft_folds.size() == 3);
  std::vector<size_t> sizes;
  for (const auto& f : s.ft_folds) sizes.push_back(f.val.size());
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<size_t>{23, 23, 24});
  CHECK(build_splits(m, {}, 5) == s);
}

TEST_CASE("split partition invariants") {
  for (int n : {17, 64, 101}) {
    const auto m = pool_manifest(n / 2, n);
    const auto s = build_splits(m, {}, static_cast<uint64_t>(n));
    std::set<std::string> pool;
    for (const auto& r : filter_cohort(m).records)
      if (r.study == "F") pool.insert(r.subject_id);
    std::set<std::string> test(s.ft_test_in_study.begin(), s.ft_test_in_study.end());
    CHECK(test.size() == static_cast<size_t>(0.3 * n));
    std::set<std::string> vals;
    for (const auto& f : s.ft_folds) {
      std::set<std::string> tr(f.train.begin(), f.train.end()), va(f.val.begin(), f.val.end());
      for (const auto& id : va) {
        CHECK_FALSE(tr.count(id));
        CHECK_FALSE(test.count(id));
        CHECK(vals.insert(id).second);  // every subject validates in exactly one fold
      }
      std::set<std::string> all(tr);
      all.insert(va.begin(), va.end());
      CHECK(all.size() + test.size() == pool.size());
    }
    CHECK(vals.size() + test.size() == pool.size());
    for (const auto& id : s.ssl_train) CHECK_FALSE(pool.count(id));
  }
}

TEST_CASE("split stratification fallback warns") {
  const auto m = pool_manifest(10, 5);  // 5 fine-tune subjects cannot fill quartile strata
  const auto s = build_splits(m, {}, 1);
  CHECK_FALSE(s.warnings.empty());
}

TEST_CASE("split json round trip") {
  const auto s = build_splits(pool_manifest(20, 40), {}, 9);
  CHECK(splits_from_json(to_json(s)) == s);
  CHECK(to_json(s).contains("ssl"));
  CHECK(to_json(s).contains("finetune"));
}

TEST_CASE("manifest counts") {
  DatasetManifest big;
  big.study_roles["S"] = {true, false, false, false};
  big.records.reserve(43740);
  for (int i = 0; i < 43740; ++i) big.records.push_back(make_record("s" + std::to_string(i), "S", std::nullopt));
  const auto st = manifest_stats(big);
  CHECK(st.center_slice_images == 43740);
  CHECK(st.five_slice_images == 218700);

  const auto empty = manifest_stats(DatasetManifest{});
  CHECK(empty.total_subjects == 0);
  CHECK(empty.five_slice_images == 0);

  DatasetManifest two;
  for (const char* s : {"A", "B"})
    for (int i = 0; i < 3; ++i) two.records.push_back(make_record(std::string(s) + std::to_string(i), s));
  const auto t = manifest_stats(two);
  CHECK(t.per_study.at("A").subjects == 3);
  CHECK(t.per_study.at("B").subjects == 3);
  CHECK(t.total_subjects == 6);
}
