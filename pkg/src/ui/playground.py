"""
Grounding Playground
Local gradio page: render a scene by seed, type a referring expression and
see the ground-truth box (red) next to the predicted box (yellow).
"""

import os
from typing import Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from ..config.schema import RunConfig
from ..config.settings import PLAYGROUND_HOST, PLAYGROUND_PORT, status
from ..core.errors import CoordGroundError, ExpressionParseError
from ..core.geometry import BBox, dequantize
from ..core.textio import parse_box
from ..data.checkpoint import load_checkpoint
from ..data.records import record_from_scene
from ..data.scenegen import default_vocabulary, generate_grounded_scene, match_expression, render
from ..evaluation.predictors import GroundingPredictor, LocateRequest, OraclePredictor
from ..training.trainer import predictor_from_checkpoint

DISPLAY_SCALE = 6
GT_COLOR = (255, 0, 0)
PRED_COLOR = (255, 220, 0)


def draw_boxes(image: np.ndarray, gt: Optional[BBox], pred: Optional[BBox],
               scale: int = DISPLAY_SCALE) -> Image.Image:
    """Upscaled RGB image with the ground-truth and predicted boxes outlined"""
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    canvas = Image.fromarray(pixels).resize((pixels.shape[1] * scale, pixels.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    for box, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        if box is not None:
            draw.rectangle([v * scale for v in box.as_tuple()], outline=color, width=2)
    return canvas


def ground_expression(predictor: GroundingPredictor, config: RunConfig, seed: int,
                      expression: str) -> Tuple[Image.Image, str, str]:
    """
    Run REC on the scene generated from ``seed``

    Returns:
        tuple: (annotated image, decoded answer, the scene's generated expressions)
    """
    scene, expressions = generate_grounded_scene(int(seed), config.scene)
    image = render(scene)
    listing = "\n".join(f"- {e.text}" for e in expressions)
    expression = (expression or "").strip().lower() or (expressions[0].text if expressions else "")

    gt = None
    try:
        matches = match_expression(scene, expression)
        if len(matches) == 1:
            gt = scene.objects[next(iter(matches))].box
    except ExpressionParseError:
        pass

    record = record_from_scene(scene, expressions, "test", "")
    answer = predictor.locate([LocateRequest(record, image, expression)])[0]
    parsed = parse_box(answer)
    pred = dequantize(parsed.box, scene.canvas) if parsed else None
    if pred is None:
        answer = f"{answer}  (no box parsed)"
    return draw_boxes(image, gt, pred), f"{expression}\n→ {answer}", listing


def load_predictor(config: RunConfig, checkpoint_path: Optional[str]) -> GroundingPredictor:
    """Model predictor for ``checkpoint_path``; falls back to the annotation oracle"""
    if checkpoint_path and os.path.exists(checkpoint_path):
        try:
            return predictor_from_checkpoint(load_checkpoint(checkpoint_path), default_vocabulary(), config.beam)
        except CoordGroundError as e:
            print(f"⚠️ Could not load {checkpoint_path}: {e}")
    print("⚠️ No checkpoint loaded; the playground answers with the annotation oracle")
    return OraclePredictor()


def create_playground(config: RunConfig, checkpoint_path: Optional[str] = None):
    """Create the playground Blocks app"""
    import gradio as gr

    predictor = load_predictor(config, checkpoint_path)

    def on_ground(seed, expression):
        try:
            return ground_expression(predictor, config, seed, expression)
        except CoordGroundError as e:
            return None, f"❌ {e}", ""

    with gr.Blocks(theme="soft", title="CoordGround Playground") as app:
        gr.Markdown("## CoordGround Playground")
        gr.Markdown("Red: ground truth. Yellow: prediction. Leave the expression empty to use the first generated one.")
        with gr.Row():
            with gr.Column():
                seed = gr.Number(label="Scene seed", value=0, precision=0)
                expression = gr.Textbox(label="Referring expression", placeholder="the left red circle")
                ground_btn = gr.Button("Locate", variant="primary")
                answer = gr.Textbox(label="Answer", lines=2, interactive=False)
                listing = gr.Markdown()
            image = gr.Image(label="Scene", type="pil")

        ground_btn.click(on_ground, inputs=[seed, expression], outputs=[image, answer, listing])
        expression.submit(on_ground, inputs=[seed, expression], outputs=[image, answer, listing])
    return app


def launch_playground(config: RunConfig, checkpoint_path: Optional[str] = None,
                      port: Optional[int] = None) -> None:
    try:
        app = create_playground(config, checkpoint_path)
    except ImportError:
        print("❌ gradio is not installed; install it with `pip install gradio` to use the playground")
        return
    port = port or PLAYGROUND_PORT
    status(f"🌐 Playground on http://{PLAYGROUND_HOST}:{port}")
    try:
        app.launch(server_name=PLAYGROUND_HOST, server_port=port, share=False, show_error=True)
    except Exception as e:
        print(f"❌ Error launching playground: {e}")
        print("💡 Try a different port with --port or set COORDGROUND_PLAYGROUND_PORT")
