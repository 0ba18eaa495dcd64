//! Decoders from fused hierarchical features to per-pixel (1/4 scale) and
//! per-point scores and descriptors.

use super::image::{pixel_shuffle, ImageInputs};
use super::points::PointHierarchy;
use super::tape::{Tape, Var};
use super::Layers;

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// One column in `(0, 1)`.
    pub score: Var,
    pub desc: Var,
}

fn dense_tanh(tape: &mut Tape, layers: &Layers, x: Var, name: &str) -> Var {
    let h = layers.dense(tape, x, name);
    tape.tanh(h)
}

fn heads(tape: &mut Tape, layers: &Layers, x: Var, prefix: &str) -> HeadVars {
    let s = layers.dense(tape, x, &format!("{prefix}.score"));
    let score = tape.sigmoid(s);
    let desc = layers.dense(tape, x, &format!("{prefix}.desc"));
    HeadVars { score, desc }
}

/// Image levels: `f1`/`f2` own features, `w1`/`w2` point features fused onto
/// the image grid.
pub fn decode_image(
    tape: &mut Tape,
    layers: &Layers,
    inputs: &ImageInputs,
    f1: Var,
    f2: Var,
    w1: Var,
    w2: Var,
) -> HeadVars {
    let [(h1, wd1), (h2, wd2), _] = inputs.grids;
    let x = tape.concat(&[w2, f2]);
    let x = dense_tanh(tape, layers, x, "imgdec.up2");
    let up2 = pixel_shuffle(tape, x, h2, wd2);
    let x = tape.concat(&[w1, f1, up2]);
    let x = dense_tanh(tape, layers, x, "imgdec.up1a");
    let x = pixel_shuffle(tape, x, h1, wd1);
    let x = dense_tanh(tape, layers, x, "imgdec.up1b");
    let x = pixel_shuffle(tape, x, 2 * h1, 2 * wd1);
    let colours = tape.leaf(inputs.pooled.clone());
    let x = tape.concat(&[x, colours]);
    let x = dense_tanh(tape, layers, x, "imgdec.skip");
    heads(tape, layers, x, "imgdec")
}

/// Point levels: `f1`/`f2` own node features, `w1`/`w2` image features fused
/// onto the nodes.
pub fn decode_points(
    tape: &mut Tape,
    layers: &Layers,
    h: &PointHierarchy,
    f1: Var,
    f2: Var,
    w1: Var,
    w2: Var,
) -> HeadVars {
    let x = tape.concat(&[w2, f2]);
    let x = dense_tanh(tape, layers, x, "ptdec.up2");
    let up2 = tape.interp(x, h.up_nodes.0.clone(), h.up_nodes.1.clone());
    let x = tape.concat(&[w1, f1, up2]);
    let x = dense_tanh(tape, layers, x, "ptdec.up1a");
    let x = tape.interp(x, h.up_points.0.clone(), h.up_points.1.clone());
    let x = dense_tanh(tape, layers, x, "ptdec.up1b");
    let coords = tape.leaf(h.coords.clone());
    let x = tape.concat(&[x, coords]);
    let x = dense_tanh(tape, layers, x, "ptdec.skip");
    heads(tape, layers, x, "ptdec")
}
