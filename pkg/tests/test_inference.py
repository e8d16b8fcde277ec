import numpy as np
import pytest

from crowdrank import synthetic
from crowdrank.encoders import count_embedding, make_mock_count_encoder
from crowdrank.errors import DimMismatch
from crowdrank.geometry import GridSpec, ImageRef
from crowdrank.inference import (
    InferenceConfig,
    predict,
    prediction_record,
    stage_count,
    stage_filter,
    timing_record,
)
from crowdrank.prompts import (
    PromptSet,
    RankingPromptSpec,
    build_filter_prompts,
    build_ranking_prompts,
    embed_prompt_set,
)

RANK_COUNTS = (20, 55, 90, 125, 160, 195)


def default_config(p=3, **kw):
    return InferenceConfig(
        grid=GridSpec(p),
        coarse_prompts=build_filter_prompts(
            "coarse", ["crowd", "tree", "car", "building", "road", "sky"], "crowd"),
        fine_prompts=build_filter_prompts(
            "fine", ["human heads", "human bodies", "human legs"], "human heads"),
        ranking_prompts=build_ranking_prompts(RankingPromptSpec()),
        **kw,
    )


def planted_image(tmp_path, specs, tile_side=64, name="img.png"):
    pixels = synthetic.paint_tile_image(specs, tile_side=tile_side)
    path = synthetic.write_png(tmp_path / name, pixels)
    return ImageRef(str(path), pixels.shape[1], pixels.shape[0])


class TestStageFilter:
    def setup_method(self):
        self.img, self.txt = make_mock_count_encoder(0)
        self.prompts = build_filter_prompts("coarse", ["crowd", "tree"], "crowd")
        self.matrix = embed_prompt_set(self.prompts, self.txt)

    def test_keeps_target_match(self):
        decision = stage_filter(self.matrix.values[0], self.prompts, self.matrix)
        assert decision.kept is True
        assert decision.chosen_index == 0

    def test_rejects_other_class(self):
        decision = stage_filter(self.matrix.values[1], self.prompts, self.matrix)
        assert decision.kept is False
        assert decision.chosen_index == 1

    def test_tie_breaks_toward_target(self):
        # equidistant from both prompts: scores are exactly equal
        both = self.matrix.values[0] + self.matrix.values[1]
        both /= np.linalg.norm(both)
        decision = stage_filter(both, self.prompts, self.matrix)
        assert decision.scores[0] == decision.scores[1]
        assert decision.chosen_index == 0
        assert decision.kept is True

    def test_threshold_rule(self):
        patch = self.matrix.values[0]
        strict = stage_filter(patch, self.prompts, self.matrix, keep_threshold=0.99)
        assert strict.kept is False  # softmax over two classes cannot reach 0.99 here
        loose = stage_filter(patch, self.prompts, self.matrix, keep_threshold=0.5)
        assert loose.kept is True

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            stage_filter(np.zeros(7), self.prompts, self.matrix)

    def test_requires_filtering_stage(self):
        ranking = build_ranking_prompts(RankingPromptSpec())
        with pytest.raises(ValueError):
            stage_filter(self.matrix.values[0], ranking, self.matrix)


class TestStageCount:
    def setup_method(self):
        self.img, self.txt = make_mock_count_encoder(0)
        self.prompts = build_ranking_prompts(RankingPromptSpec())
        self.matrix = embed_prompt_set(self.prompts, self.txt)

    def test_exact_match(self):
        assert stage_count(count_embedding(90), self.prompts, self.matrix) == 90

    def test_between_intervals_brute_forced(self):
        # oracle: evaluate both candidate similarities and take the winner
        patch = count_embedding(37)
        scores = self.matrix.values @ patch
        expected = self.prompts.counts[int(np.argmax(scores))]
        assert stage_count(patch, self.prompts, self.matrix) == expected
        assert expected in (20, 55)

    def test_exact_tie_takes_smaller_count(self):
        # identical text rows for both counts force equal scores
        row = count_embedding(40)
        matrix = embed_prompt_set(
            PromptSet(stage="ranking", texts=("a", "a"), counts=(20, 55)), self.txt)
        assert matrix.values[0] @ row == matrix.values[1] @ row
        assert stage_count(row, PromptSet(stage="ranking", texts=("a", "a"),
                                          counts=(20, 55)), matrix) == 20

    def test_counts_required(self):
        naked = PromptSet(stage="ranking", texts=self.prompts.texts)
        with pytest.raises(ValueError):
            stage_count(count_embedding(55), naked, self.matrix)


class TestPredict:
    def test_planted_grid_sums_exactly(self, tmp_path):
        specs = [
            [("crowd", 20), ("tree", 0), ("crowd", 55)],
            [("car", 0), ("crowd", 55), ("building", 0)],
            [("road", 0), ("sky", 0), ("crowd", 125)],
        ]
        ref = planted_image(tmp_path, specs)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        pred = predict(ref, enc_o, enc_f, txt, default_config())
        assert pred.total == 255
        zero_tiles = [t for t in pred.tiles if t.patch_count == 0]
        assert len(zero_tiles) == 5
        kept = [t.patch_count for t in pred.tiles if t.patch_count > 0]
        assert sorted(kept) == [20, 55, 55, 125]

    def test_everything_filtered_short_circuits(self, tmp_path):
        specs = [[("tree", 0), ("car", 0)], [("road", 0), ("sky", 0)]]
        ref = planted_image(tmp_path, specs)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        before_o, before_f = enc_o.call_counter, enc_f.call_counter
        pred = predict(ref, enc_o, enc_f, txt, default_config(p=2))
        assert pred.total == 0
        assert enc_o.call_counter - before_o == 4  # coarse stage only
        assert enc_f.call_counter - before_f == 0

    def test_stage_call_counts_follow_survivors(self, tmp_path):
        specs = [
            [("crowd", 20), ("human bodies", 0), ("tree", 0)],
            [("crowd", 90), ("human legs", 0), ("car", 0)],
            [("sky", 0), ("crowd", 160), ("building", 0)],
        ]
        ref = planted_image(tmp_path, specs)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        pred = predict(ref, enc_o, enc_f, txt, default_config())
        # 9 coarse + 5 fine (3 crowd + 2 body parts pass coarse), 3 ranking
        assert enc_o.call_counter == 9 + 5
        assert enc_f.call_counter == 3
        assert pred.total == 20 + 90 + 160

    def test_single_tile_identity(self, tmp_path):
        ref = planted_image(tmp_path, [[("crowd", 90)]], tile_side=96)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        pred = predict(ref, enc_o, enc_f, txt, default_config(p=1))
        assert pred.total == 90

    def test_deterministic(self, tmp_path):
        specs = [[("crowd", 55), ("tree", 0)], [("human bodies", 0), ("crowd", 195)]]
        ref = planted_image(tmp_path, specs)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        cfg = default_config(p=2)
        a = prediction_record(predict(ref, enc_o, enc_f, txt, cfg))
        b = prediction_record(predict(ref, enc_o, enc_f, txt, cfg))
        assert a == b

    def test_tile_permutation_leaves_total_unchanged(self, tmp_path):
        specs = [
            [("crowd", 20), ("tree", 0), ("crowd", 125)],
            [("car", 0), ("crowd", 55), ("sky", 0)],
            [("crowd", 90), ("building", 0), ("road", 0)],
        ]
        flat = [s for row in specs for s in row]
        rng = np.random.default_rng(4)
        shuffled = [flat[i] for i in rng.permutation(9)]
        permuted = [shuffled[i:i + 3] for i in range(0, 9, 3)]
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        ref_a = planted_image(tmp_path, specs, name="a.png")
        ref_b = planted_image(tmp_path, permuted, name="b.png")
        cfg = default_config()
        total_a = predict(ref_a, enc_o, enc_f, txt, cfg).total
        total_b = predict(ref_b, enc_o, enc_f, txt, cfg).total
        assert total_a == total_b

    def test_stage_skipping(self, tmp_path):
        # with both filters off, every tile reaches the count stage
        specs = [[("tree", 0), ("crowd", 55)], [("sky", 0), ("crowd", 90)]]
        ref = planted_image(tmp_path, specs)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        cfg = default_config(p=2, use_coarse=False, use_fine=False)
        pred = predict(ref, enc_o, enc_f, txt, cfg)
        assert enc_f.call_counter == 4
        assert all(len(t.decisions) == 1 for t in pred.tiles)

    def test_zero_shot_uses_original_encoder(self, tmp_path):
        ref = planted_image(tmp_path, [[("crowd", 90)]], tile_side=96)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        cfg = default_config(p=1, use_finetuned_for_ranking=False)
        predict(ref, enc_o, enc_f, txt, cfg)
        assert enc_f.call_counter == 0

    def test_resize_policy_applied(self, tmp_path):
        specs = [[("crowd", 55)]]
        pixels = synthetic.paint_tile_image(specs, tile_side=64)
        path = synthetic.write_png(tmp_path / "big.png", pixels)
        # pretend the image is huge so the long-side cap engages
        ref = ImageRef(str(path), 64, 64)
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        cfg = default_config(p=1, resize_max_long=48)
        pred = predict(ref, enc_o, enc_f, txt, cfg)
        assert pred.image.width == 47

    def test_text_embedded_once_across_images(self, tmp_path):
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        cfg = default_config(p=2)
        refs = [planted_image(tmp_path, [[("crowd", 20), ("tree", 0)],
                                         [("crowd", 55), ("sky", 0)]], name=f"{i}.png")
                for i in range(4)]
        predict(refs[0], enc_o, enc_f, txt, cfg)
        after_first = txt.call_counter
        n_prompts = (len(cfg.coarse_prompts.texts) + len(cfg.fine_prompts.texts)
                     + len(cfg.ranking_prompts.texts))
        assert after_first == n_prompts
        for ref in refs[1:]:
            predict(ref, enc_o, enc_f, txt, cfg)
        assert txt.call_counter == after_first

    def test_records(self, tmp_path):
        ref = planted_image(tmp_path, [[("crowd", 90), ("tree", 0)],
                                       [("crowd", 20), ("sky", 0)]])
        enc_o, txt = make_mock_count_encoder(0)
        enc_f, _ = make_mock_count_encoder(0)
        pred = predict(ref, enc_o, enc_f, txt, default_config(p=2))
        record = prediction_record(pred)
        assert record["total"] == 110
        assert record["p"] == 2
        assert len(record["tiles"]) == 4
        assert all("scores" in d for t in record["tiles"] for d in t["decisions"])
        timing = timing_record(pred)
        assert set(timing["stage_seconds"]) == {"coarse", "fine", "ranking"}
        assert timing["fps"] > 0


def test_inference_config_requires_counts():
    with pytest.raises(ValueError):
        InferenceConfig(
            grid=GridSpec(3),
            coarse_prompts=build_filter_prompts("coarse", ["crowd", "tree"], "crowd"),
            fine_prompts=build_filter_prompts("fine", ["human heads", "human bodies"],
                                              "human heads"),
            ranking_prompts=PromptSet(stage="ranking", texts=("x",)),
        )
