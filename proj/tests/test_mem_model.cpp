#include <gtest/gtest.h>

#include <set>

#include "cachex/mem_model.hpp"

using namespace cachex;

TEST(MemModel, ContiguousBackingIsOneRun) {
  const auto m = build_translation(FragmentationProfile::contiguous(), 512, 7);
  const std::uint64_t base = m.hpa_page_of_gpa_page(0);
  for (std::uint64_t g = 0; g < 512; ++g) EXPECT_EQ(m.hpa_page_of_gpa_page(g), base + g);
  EXPECT_TRUE(m.injective());
  EXPECT_EQ(m.host_pages(), 4u * 512);
}

TEST(MemModel, ByteOffsetSurvivesTranslation) {
  const auto m = build_translation(FragmentationProfile::fragmented(1.0), 256, 3);
  for (std::uint64_t gva : {0x0ull, 0x1abcull, 0x20fffull, 0xff040ull}) {
    const std::uint64_t hpa = m.gva_to_hpa(gva);
    EXPECT_EQ(hpa & 0xfff, gva & 0xfff);
    EXPECT_EQ(translate(m, Address{gva, Space::GVA}, Space::HPA).value, hpa);
    const auto gpa = translate(m, Address{gva, Space::GVA}, Space::GPA);
    EXPECT_EQ(translate(m, gpa, Space::HPA).value, hpa);
  }
}

TEST(MemModel, TranslationRunsOneWay) {
  const auto m = build_translation(FragmentationProfile::contiguous(), 64, 1);
  EXPECT_THROW(translate(m, Address{0, Space::HPA}, Space::GVA), Error);
  EXPECT_THROW(m.gva_to_hpa(64ull << kPageBits), Error);
}

TEST(MemModel, ShuffleMovesTheRequestedShare) {
  const auto c = build_translation(FragmentationProfile::contiguous(), 1000, 9);
  const auto f = build_translation(FragmentationProfile::fragmented(1.0), 1000, 9);
  std::size_t adjacent = 0;
  for (std::uint64_t g = 1; g < 1000; ++g) adjacent += f.hpa_page_of_gpa_page(g) == f.hpa_page_of_gpa_page(g - 1) + 1;
  EXPECT_LT(adjacent, 20u);
  EXPECT_TRUE(f.injective());
  EXPECT_TRUE(c.injective());
}

TEST(MemModel, RemapChangesCeilFractionPages) {
  const auto m = build_translation(FragmentationProfile::contiguous(), 1001, 5);
  const auto r = apply_remap(m, RemapEvent{0, 0.1, {}});
  std::size_t moved = 0;
  for (std::uint64_t g = 0; g < 1001; ++g) moved += m.hpa_page_of_gpa_page(g) != r.hpa_page_of_gpa_page(g);
  EXPECT_EQ(moved, 101u);
  EXPECT_TRUE(r.injective());
  EXPECT_THROW(apply_remap(m, RemapEvent{0, 0.0, {}}), Error);
  EXPECT_THROW(apply_remap(m, RemapEvent{0, 0.5, std::vector<double>(3, 1.0)}), Error);
}

TEST(MemModel, BiasedRemapLandsOnWeightedColors) {
  const auto m = build_translation(FragmentationProfile::contiguous(), 512, 5);
  std::vector<double> bias(32, 0.0);
  bias[7] = 1.0;
  const auto r = apply_remap(m, RemapEvent{0, 0.05, bias});
  for (std::uint64_t g = 0; g < 512; ++g)
    if (m.hpa_page_of_gpa_page(g) != r.hpa_page_of_gpa_page(g)) {
      EXPECT_EQ(llc_color_of_hpa(r.hpa_page_of_gpa_page(g) << kPageBits), 7u);
    }
}

TEST(MemModel, HostColoringRestrictsBackings) {
  FragmentationProfile p = FragmentationProfile::fragmented(0.5);
  p.allowed_l2_colors = 0x00F0;
  const auto m = build_translation(p, 300, 11);
  for (std::uint64_t g = 0; g < 300; ++g) {
    const unsigned c = l2_color_of_hpa(m.hpa_page_of_gpa_page(g) << kPageBits);
    EXPECT_GE(c, 4u);
    EXPECT_LE(c, 7u);
  }
}

TEST(MemModel, OracleColorReadsHostBits) {
  const auto m = build_translation(FragmentationProfile::fragmented(1.0), 128, 13);
  for (std::uint64_t page = 0; page < 128; ++page) {
    const std::uint64_t gva = (page << kPageBits) | 0x40;
    const std::uint64_t hpa = m.gva_to_hpa(gva);
    EXPECT_EQ(oracle_color(m, Address{gva}, Level::L2), (hpa >> 12) & 0xF);
    EXPECT_EQ(oracle_color(m, Address{gva}, Level::LLC), (hpa >> 12) & 0x1F);
    EXPECT_EQ(oracle_color(m, Address{gva}, Level::LLC, 2u), (hpa >> 12) & 0x3);
  }
}

TEST(MemModel, MapGvaKeepsInjectivity) {
  auto m = build_translation(FragmentationProfile::contiguous(), 32, 2);
  m.map_gva(0, 5);
  EXPECT_TRUE(m.injective());
  EXPECT_THROW(m.gpa_page_of_gva_page(5), Error);
  const std::uint64_t taken = m.hpa_page_of_gpa_page(1);
  EXPECT_THROW(m.map_gpa(2, taken), Error);
}

TEST(MemModel, SameSeedSameMap) {
  const auto a = build_translation(FragmentationProfile::fragmented(0.3), 400, 42);
  const auto b = build_translation(FragmentationProfile::fragmented(0.3), 400, 42);
  for (std::uint64_t g = 0; g < 400; ++g) EXPECT_EQ(a.hpa_page_of_gpa_page(g), b.hpa_page_of_gpa_page(g));
}
