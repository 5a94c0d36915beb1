#include <gtest/gtest.h>

#include <unistd.h>

#include "service_contract.hpp"
#include "tightbox/errors.hpp"

using namespace tightbox;
namespace fs = std::filesystem;

namespace {

fs::path workdir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tightbox_service_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(ServiceContract, AllChecks) {
  const auto dir = workdir("contract");
  const auto checks = contract::run_service_contract(dir);
  EXPECT_GE(checks.size(), 25u);
  for (const auto& c : checks) EXPECT_TRUE(c.ok) << c.name << " " << c.detail;
  fs::remove_all(dir);
}

TEST(LabelStore, AddFindRemoveReload) {
  const auto dir = workdir("store");
  LabeledInstance l;
  l.image_id = "a.png";
  l.prelabel_box = BBox{1, 2, 3, 4};
  l.source = LabelSource::human;
  std::string id1, id2;
  {
    LabelStore store(dir / "labels.jsonl");
    id1 = store.add(l);
    id2 = store.add(l);
    EXPECT_NE(id1, id2);
    EXPECT_EQ(id1.size(), 16u);
    LabeledInstance other = l;
    other.image_id = "b.png";
    store.add(other);
    EXPECT_EQ(store.size(), 3u);
    EXPECT_EQ(store.list(std::string("a.png")).size(), 2u);
    ASSERT_TRUE(store.find(id1).has_value());
    EXPECT_EQ(label_box(*store.find(id1)), (BBox{1, 2, 3, 4}));
    EXPECT_TRUE(store.remove(id1));
    EXPECT_FALSE(store.remove(id1));
    EXPECT_FALSE(store.find(id1).has_value());
  }
  LabelStore again(dir / "labels.jsonl");
  EXPECT_EQ(again.size(), 2u);
  EXPECT_TRUE(again.find(id2).has_value());
  // Export reloads to an equal label set.
  EXPECT_EQ(load_labels(again.path()), again.list());
  fs::remove_all(dir);
}

TEST(LabelStore, KeepsExplicitIdsAndReassignsTakenOnes) {
  const auto dir = workdir("ids");
  LabelStore store(dir / "l.jsonl");
  LabeledInstance l;
  l.id = "00000000000000aa";
  l.image_id = "x.png";
  l.true_box = BBox{0, 0, 5, 5};
  EXPECT_EQ(store.add(l), "00000000000000aa");
  const std::string second = store.add(l);
  EXPECT_NE(second, "00000000000000aa");
  EXPECT_EQ(store.size(), 2u);
  fs::remove_all(dir);
}

TEST(Service, BindFailureIsIoError) {
  const auto dir = workdir("bind");
  ServiceConfig cfg;
  cfg.data_root = dir;
  cfg.port = 0;
  Service a(cfg);
  const int port = a.start();
  cfg.port = port;
  cfg.labels_path = dir / "other.jsonl";
  Service b(cfg);
  EXPECT_THROW(b.start(), IoError);
  a.stop();
  fs::remove_all(dir);
}
