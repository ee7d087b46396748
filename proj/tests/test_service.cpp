#include <doctest.h>

#include "samseg/bench.hpp"
#include "samseg/service.hpp"

#include <httplib.h>

#include <filesystem>
#include <sstream>
#include <thread>

using namespace samseg;

namespace {

// Foreground is the union of 5x5 squares around positive clicks minus the
// squares around negative clicks, applied in order.
Logits squares(const RgbImage& img, std::span<const Click> clicks) {
    Mask m = Mask::Zero(img.height(), img.width());
    for (const auto& c : clicks) {
        const Index r0 = std::max<Index>(0, c.row - 2), c0 = std::max<Index>(0, c.col - 2);
        const Index r1 = std::min(img.height(), c.row + 3), c1 = std::min(img.width(), c.col + 3);
        m.block(r0, c0, r1 - r0, c1 - c0).setConstant(c.polarity == Polarity::positive ? 1 : 0);
    }
    return mask_to_logits(m);
}

struct Fixture {
    std::vector<Patch> patches = synth_patches(3, 21, 64);
    std::shared_ptr<FunctionSegmenter> square_model =
        std::make_shared<FunctionSegmenter>("squares", [](const RgbImage& img, auto clicks, auto) {
            return squares(img, clicks);
        });
    std::shared_ptr<SamSegmenter> sam =
        std::make_shared<SamSegmenter>(std::make_shared<SamModel>(ModelConfig::toy(8, 64)), "toy");
    std::shared_ptr<ModelRegistry> registry = [this] {
        auto r = std::make_shared<ModelRegistry>();
        r->add("squares", square_model, "5x5 squares");
        r->add("toy", sam, "untrained toy model");
        return r;
    }();
};

int status_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const ServiceError& e) {
        return e.status;
    }
    return 0;
}

}  // namespace

TEST_CASE("registry rejects duplicates and unknown ids") {
    ModelRegistry r;
    r.add("a", make_builtin_adapter("empty"));
    CHECK_THROWS(r.add("a", make_builtin_adapter("full")));
    CHECK(r.find("a") != nullptr);
    CHECK(r.find("b") == nullptr);
}

TEST_CASE("session lifecycle: create, click, undo, export") {
    Fixture f;
    SessionManager mgr(f.registry, memory_lookup(f.patches));
    const auto info = mgr.create_from_patch("squares", f.patches[0].patch_id);
    CHECK(info.id.size() == 32);
    CHECK(info.height == 64);
    CHECK(info.has_ground_truth);
    CHECK(count(mgr.current_mask(info.id)) == 0);

    const auto a = mgr.add_click(info.id, 10, 10, Polarity::positive);
    CHECK(count(a.mask) == 25);
    REQUIRE(a.iou.has_value());
    CHECK(*a.iou == iou(a.mask, f.patches[0].gt));
    const auto b = mgr.add_click(info.id, 10, 10, Polarity::negative);
    CHECK(count(b.mask) == 0);
    CHECK(b.click.ordinal == 2);

    const auto after = mgr.undo(info.id);
    CHECK(after.clicks == 1);
    CHECK((mgr.current_mask(info.id) == a.mask).all());
    mgr.undo(info.id);
    CHECK(count(mgr.current_mask(info.id)) == 0);
    CHECK(status_of([&] { mgr.undo(info.id); }) == 409);

    mgr.add_click(info.id, 30, 40, Polarity::positive);
    const auto exported = mgr.export_session(info.id);
    REQUIRE(exported.size() == 1);
    CHECK(exported[0].click.row == 30);
    CHECK(exported[0].iou.has_value());
}

TEST_CASE("service errors map to statuses and leave state unchanged") {
    Fixture f;
    SessionManager mgr(f.registry, memory_lookup(f.patches));
    CHECK(status_of([&] { mgr.create_from_patch("nope", f.patches[0].patch_id); }) == 404);
    CHECK(status_of([&] { mgr.create_from_patch("squares", "nope"); }) == 404);
    CHECK(status_of([&] { mgr.info("0123"); }) == 404);
    const auto id = mgr.create_from_patch("squares", f.patches[0].patch_id).id;
    mgr.add_click(id, 5, 5, Polarity::positive);
    const auto before = mgr.current_mask(id);
    CHECK(status_of([&] { mgr.add_click(id, 64, 0, Polarity::positive); }) == 422);
    CHECK(mgr.info(id).clicks == 1);
    CHECK((mgr.current_mask(id) == before).all());
    const Bytes garbage{1, 2, 3};
    CHECK(status_of([&] { mgr.create_from_upload("squares", garbage); }) == 422);
    const Bytes wide = encode_png(RgbImage(8, 16));
    CHECK(status_of([&] { mgr.create_from_upload("squares", wide); }) == 422);
}

TEST_CASE("uploads have no ground truth and export without IoU") {
    Fixture f;
    SessionManager mgr(f.registry);
    const auto info = mgr.create_from_upload("squares", encode_png(f.patches[1].image));
    CHECK_FALSE(info.has_ground_truth);
    const auto out = mgr.add_click(info.id, 3, 3, Polarity::positive);
    CHECK_FALSE(out.iou.has_value());
    CHECK_FALSE(mgr.export_session(info.id)[0].iou.has_value());
}

TEST_CASE("twenty clicks reuse one encoding") {
    Fixture f;
    SessionManager mgr(f.registry, memory_lookup(f.patches));
    const auto id = mgr.create_from_patch("toy", f.patches[0].patch_id).id;
    for (int i = 0; i < 20; ++i) mgr.add_click(id, i * 3, 63 - i * 3, i % 2 ? Polarity::negative : Polarity::positive);
    CHECK(f.sam->encode_calls() == 1);
    CHECK(f.sam->decode_calls() == 20);
    CHECK(mgr.state(id).clicks.size() == 20);
}

TEST_CASE("exported trajectories replay to the same IoUs") {
    Fixture f;
    SessionManager mgr(f.registry, memory_lookup(f.patches));
    const auto id = mgr.create_from_patch("toy", f.patches[2].patch_id).id;
    mgr.add_click(id, 20, 20, Polarity::positive);
    mgr.add_click(id, 40, 12, Polarity::negative);
    mgr.add_click(id, 33, 50, Polarity::positive);
    const auto exported = mgr.export_session(id);
    std::vector<Click> clicks;
    for (const auto& e : exported) clicks.push_back(e.click);
    const auto replayed = replay_trajectory(f.patches[2], *f.sam, clicks);
    REQUIRE(replayed.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(replayed[i] == doctest::Approx(*exported[i].iou).epsilon(1e-12));
}

TEST_CASE("concurrent sessions do not interfere") {
    Fixture f;
    SessionManager mgr(f.registry, memory_lookup(f.patches));
    const auto a = mgr.create_from_patch("toy", f.patches[0].patch_id).id;
    const auto b = mgr.create_from_patch("toy", f.patches[1].patch_id).id;
    auto worker = [](SessionManager& m, const std::string& id, Index col) {
        for (Index i = 0; i < 8; ++i) m.add_click(id, i * 7, col, Polarity::positive);
    };
    std::thread ta(worker, std::ref(mgr), a, 5), tb(worker, std::ref(mgr), b, 50);
    ta.join();
    tb.join();
    for (const auto& [id, col] : {std::pair{a, Index{5}}, std::pair{b, Index{50}}}) {
        const auto s = mgr.state(id);
        REQUIRE(s.clicks.size() == 8);
        for (Index i = 0; i < 8; ++i) {
            CHECK(s.clicks[static_cast<std::size_t>(i)].row == i * 7);
            CHECK(s.clicks[static_cast<std::size_t>(i)].col == col);
        }
    }
    // Both sessions alone must give the same masks as when interleaved.
    SessionManager solo(f.registry, memory_lookup(f.patches));
    const auto c = solo.create_from_patch("toy", f.patches[0].patch_id).id;
    worker(solo, c, 5);
    CHECK((solo.current_mask(c) == mgr.current_mask(a)).all());
}

TEST_CASE("sessions survive a restart through the store") {
    Fixture f;
    const auto db = std::filesystem::temp_directory_path() / "samseg_service_restart.db";
    std::filesystem::remove(db);
    std::string corpus_id, upload_id;
    Mask corpus_mask, upload_mask;
    {
        SessionManager mgr(f.registry, memory_lookup(f.patches), std::make_shared<SessionStore>(db));
        corpus_id = mgr.create_from_patch("toy", f.patches[0].patch_id).id;
        mgr.add_click(corpus_id, 10, 10, Polarity::positive);
        mgr.add_click(corpus_id, 30, 30, Polarity::negative);
        corpus_mask = mgr.current_mask(corpus_id);
        upload_id = mgr.create_from_upload("squares", encode_png(f.patches[1].image)).id;
        mgr.add_click(upload_id, 7, 7, Polarity::positive);
        upload_mask = mgr.current_mask(upload_id);
    }
    SessionManager again(f.registry, memory_lookup(f.patches), std::make_shared<SessionStore>(db));
    CHECK(again.restore() == 2);
    CHECK(again.session_count() == 2);
    CHECK(again.state(corpus_id).clicks.size() == 2);
    CHECK((again.current_mask(corpus_id) == corpus_mask).all());
    CHECK((again.current_mask(upload_id) == upload_mask).all());
    again.undo(corpus_id);
    SessionManager third(f.registry, memory_lookup(f.patches), std::make_shared<SessionStore>(db));
    third.restore();
    CHECK(third.state(corpus_id).clicks.size() == 1);
    std::filesystem::remove(db);
}

TEST_CASE("http api") {
    Fixture f;
    SessionManager mgr(f.registry, memory_lookup(f.patches));
    HttpServer server(mgr, *f.registry, ServerOptions{"127.0.0.1", 0, {}});
    const int port = server.start();
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);

    auto models = cli.Get("/models");
    REQUIRE(models);
    CHECK(models->status == 200);
    CHECK(nlohmann::json::parse(models->body).at("models").size() == 2);
    CHECK(models->get_header_value("Access-Control-Allow-Origin") == "*");

    const nlohmann::json create{{"model_id", "squares"}, {"patch_id", f.patches[0].patch_id}};
    auto created = cli.Post("/sessions", create.dump(), "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    const auto id = nlohmann::json::parse(created->body).at("session_id").get<std::string>();

    auto click = cli.Post("/sessions/" + id + "/clicks", R"({"row": 10, "col": 12, "polarity": "positive"})",
                          "application/json");
    REQUIRE(click);
    CHECK(click->status == 200);
    const auto body = nlohmann::json::parse(click->body);
    const Mask mask = rle_decode(rle_from_json(body.at("mask")));
    CHECK(count(mask) == 25);
    CHECK(body.at("click").at("ordinal") == 1);
    CHECK(body.at("iou").is_number());

    auto got = cli.Get("/sessions/" + id);
    REQUIRE(got);
    const auto state = nlohmann::json::parse(got->body);
    CHECK(state.at("click_list").size() == 1);
    CHECK((rle_decode(rle_from_json(state.at("mask"))) == mask).all());

    auto png = cli.Get("/sessions/" + id + "/mask.png");
    REQUIRE(png);
    CHECK(png->get_header_value("Content-Type") == "image/png");
    const Bytes bytes(png->body.begin(), png->body.end());
    CHECK((mask_from_gray(decode_png_gray(bytes)) == mask).all());

    auto exported = cli.Get("/sessions/" + id + "/export");
    REQUIRE(exported);
    std::istringstream lines(exported->body);
    CHECK(read_trajectory(lines).size() == 1);

    auto oob = cli.Post("/sessions/" + id + "/clicks", R"({"row": 99, "col": 0})", "application/json");
    REQUIRE(oob);
    CHECK(oob->status == 422);
    auto bad_polarity = cli.Post("/sessions/" + id + "/clicks", R"({"row": 1, "col": 0, "polarity": "up"})",
                                 "application/json");
    REQUIRE(bad_polarity);
    CHECK(bad_polarity->status == 422);
    auto malformed = cli.Post("/sessions/" + id + "/clicks", "{not json", "application/json");
    REQUIRE(malformed);
    CHECK(malformed->status == 400);

    auto undo = cli.Post("/sessions/" + id + "/undo", "", "application/json");
    REQUIRE(undo);
    CHECK(undo->status == 200);
    auto undo_again = cli.Post("/sessions/" + id + "/undo", "", "application/json");
    REQUIRE(undo_again);
    CHECK(undo_again->status == 409);

    auto missing = cli.Get("/sessions/00000000000000000000000000000000");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    const nlohmann::json unknown_model{{"model_id", "nope"}, {"patch_id", f.patches[0].patch_id}};
    auto bad_model = cli.Post("/sessions", unknown_model.dump(), "application/json");
    REQUIRE(bad_model);
    CHECK(bad_model->status == 404);

    const Bytes upload = encode_png(f.patches[1].image);
    auto up = cli.Post("/sessions?model_id=squares", std::string(upload.begin(), upload.end()), "image/png");
    REQUIRE(up);
    CHECK(up->status == 201);
    CHECK(nlohmann::json::parse(up->body).at("patch_id").is_null());
    auto bad_upload = cli.Post("/sessions?model_id=squares", "garbage", "image/png");
    REQUIRE(bad_upload);
    CHECK(bad_upload->status == 422);

    server.stop();
}
