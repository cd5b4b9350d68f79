#include <doctest.h>

#include <cmath>
#include <sstream>

#include "specbench/errors.hpp"
#include "specbench/plot.hpp"

using namespace specbench;

namespace {

int count(const std::string& text, const std::string& needle) {
  int n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("emit_svg structure") {
  const std::string svg = emit_svg({PlotSeries{"a", {0, 1}, {0.5, 0.7}, std::nullopt}}, {"x", "y", "t"});
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(count(svg, "<path") == 1);
  CHECK(count(svg, "class=\"errbar\"") == 0);
  CHECK(svg.find("href") == std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);

  const std::vector<PlotSeries> two{
      PlotSeries{"knn", {0, 0.1, 0.2}, {0.9, 0.8, 0.6}, std::vector<double>{0.01, 0.02, 0.05}},
      PlotSeries{"CNN<1>", {0, 0.1, 0.2}, {0.95, 0.93, 0.9}, std::vector<double>{0, 0.01, 0.02}}};
  const std::string many = emit_svg(two, {"noise level", "accuracy", ""});
  CHECK(count(many, "<path") == 2);
  CHECK(count(many, "class=\"errbar\"") == 6);
  CHECK(many.find("CNN&lt;1&gt;") != std::string::npos);
  CHECK(emit_svg(two, {"noise level", "accuracy", ""}) == many);
}

TEST_CASE("emit_svg degenerate ranges and errors") {
  CHECK(count(emit_svg({PlotSeries{"flat", {1}, {2}, std::nullopt}}), "<path") == 1);
  CHECK_THROWS_AS(emit_svg({}), DataError);
  CHECK_THROWS_AS(emit_svg({PlotSeries{"e", {}, {}, std::nullopt}}), DataError);
  CHECK_THROWS_AS(emit_svg({PlotSeries{"m", {0, 1}, {0}, std::nullopt}}), DataError);
  CHECK_THROWS_AS(emit_svg({PlotSeries{"n", {0}, {NAN}, std::nullopt}}), DataError);
  CHECK_THROWS_AS(emit_svg({PlotSeries{"s", {0}, {1}, std::vector<double>{-0.1}}}), DataError);
}

TEST_CASE("series from csv") {
  std::istringstream sweep("model,level,mean,std,n\nknn,0,0.9,0.01,10\nknn,0.5,0.6,0.05,10\nCNN,0,0.97,0,10\n");
  const auto s = sweep_series(sweep);
  REQUIRE(s.size() == 2);
  CHECK(s[0].label == "knn");
  CHECK(s[0].x == std::vector<double>{0, 0.5});
  CHECK(*s[0].y_err == std::vector<double>{0.01, 0.05});
  CHECK(s[1].y == std::vector<double>{0.97});

  std::istringstream history("epoch,train_loss,val_accuracy\n1,1.3,nan\n2,0.9,nan\n");
  const auto h = history_series(history);
  CHECK(h[0].y == std::vector<double>{1.3, 0.9});

  std::istringstream wrong("a,b\n1,2\n");
  CHECK_THROWS_AS(sweep_series(wrong), DataError);
  std::istringstream bad("model,level,mean,std,n\nknn,x,0.9,0.01,10\n");
  CHECK_THROWS_WITH_AS(sweep_series(bad), doctest::Contains("line 2"), DataError);
}
