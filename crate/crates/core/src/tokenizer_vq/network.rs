use rand::Rng;

use super::{Result, VqConfig};
use crate::synthdata::FRAME_DIM;
use crate::tensor::{ParamStore, Tape, Var};

/// Gather index for a 1-D convolution over concatenated clips; `None` is zero padding.
fn conv_index(lens: &[usize], k: usize, stride: usize, pad: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut index = Vec::new();
    let mut out_lens = Vec::with_capacity(lens.len());
    let mut off = 0;
    for &len in lens {
        let out_len = (len + 2 * pad - k) / stride + 1;
        for o in 0..out_len {
            for j in 0..k {
                let i = (o * stride + j) as isize - pad as isize;
                index.push((i >= 0 && (i as usize) < len).then(|| off + i as usize));
            }
        }
        out_lens.push(out_len);
        off += len;
    }
    (index, out_lens)
}

/// Nearest-neighbour doubling of every clip.
fn upsample<'t>(x: Var<'t>, lens: &[usize]) -> Result<(Var<'t>, Vec<usize>)> {
    let mut index = Vec::new();
    let mut off = 0;
    for &len in lens {
        index.extend((0..2 * len).map(|i| Some(off + i / 2)));
        off += len;
    }
    Ok((x.gather_rows(&index)?, lens.iter().map(|l| 2 * l).collect()))
}

struct Conv {
    name: &'static str,
    k: usize,
    stride: usize,
    pad: usize,
}

const fn conv(name: &'static str, k: usize, stride: usize) -> Conv {
    Conv {
        name,
        k,
        stride,
        pad: if stride == 2 { 1 } else { k / 2 },
    }
}

const ENC_DOWN1: Conv = conv("enc.down1", 4, 2);
const ENC_DOWN2: Conv = conv("enc.down2", 4, 2);
const ENC_RES_A: Conv = conv("enc.res_a", 3, 1);
const ENC_RES_B: Conv = conv("enc.res_b", 3, 1);
const ENC_OUT: Conv = conv("enc.out", 3, 1);
const DEC_IN: Conv = conv("dec.in", 3, 1);
const DEC_RES_A: Conv = conv("dec.res_a", 3, 1);
const DEC_RES_B: Conv = conv("dec.res_b", 3, 1);
const DEC_UP1: Conv = conv("dec.up1", 3, 1);
const DEC_UP2: Conv = conv("dec.up2", 3, 1);
const DEC_OUT: Conv = conv("dec.out", 3, 1);

impl Conv {
    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, lens: &[usize]) -> Result<(Var<'t>, Vec<usize>)> {
        let c_in = x.shape()[1];
        let (index, out_lens) = conv_index(lens, self.k, self.stride, self.pad);
        let rows: usize = out_lens.iter().sum();
        let cols = x.gather_rows(&index)?.reshape(&[rows, self.k * c_in])?;
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        Ok((cols.matmul(w)?.add(b)?, out_lens))
    }
}

pub(crate) fn init_params<R: Rng>(cfg: &VqConfig, rng: &mut R) -> Result<ParamStore> {
    let (h, d) = (cfg.hidden, cfg.latent_dim);
    let layers = [
        (&ENC_DOWN1, FRAME_DIM, h),
        (&ENC_DOWN2, h, h),
        (&ENC_RES_A, h, h),
        (&ENC_RES_B, h, h),
        (&ENC_OUT, h, d),
        (&DEC_IN, d, h),
        (&DEC_RES_A, h, h),
        (&DEC_RES_B, h, h),
        (&DEC_UP1, h, h),
        (&DEC_UP2, h, h),
        (&DEC_OUT, h, FRAME_DIM),
    ];
    let mut store = ParamStore::new();
    for (layer, c_in, c_out) in layers {
        let fan_in = layer.k * c_in;
        store.insert_normal(&format!("{}.w", layer.name), &[fan_in, c_out], (1.0 / fan_in as f64).sqrt(), rng)?;
        store.insert_const(&format!("{}.b", layer.name), &[c_out], 0.0)?;
    }
    Ok(store)
}

fn residual<'t>(tape: &'t Tape, store: &ParamStore, x: Var<'t>, lens: &[usize], a: &Conv, b: &Conv) -> Result<Var<'t>> {
    let (h, _) = a.apply(tape, store, x, lens)?;
    let (h, _) = b.apply(tape, store, h.gelu(), lens)?;
    Ok(x.add(h)?)
}

/// Normalized frames `[ΣT, 16]` of clips with frame counts `lens` to latents `[ΣT/4, d]`.
pub(crate) fn encoder<'t>(tape: &'t Tape, store: &ParamStore, x: Var<'t>, lens: &[usize]) -> Result<Var<'t>> {
    let (h, lens) = ENC_DOWN1.apply(tape, store, x, lens)?;
    let (h, lens) = ENC_DOWN2.apply(tape, store, h.gelu(), &lens)?;
    let h = residual(tape, store, h.gelu(), &lens, &ENC_RES_A, &ENC_RES_B)?;
    Ok(ENC_OUT.apply(tape, store, h, &lens)?.0)
}

/// Latents `[Σn, d]` of clips with token counts `lens` to normalized frames `[4Σn, 16]`.
pub(crate) fn decoder<'t>(tape: &'t Tape, store: &ParamStore, z: Var<'t>, lens: &[usize]) -> Result<Var<'t>> {
    let (h, lens) = DEC_IN.apply(tape, store, z, lens)?;
    let h = residual(tape, store, h.gelu(), &lens, &DEC_RES_A, &DEC_RES_B)?;
    let (h, lens) = upsample(h, &lens)?;
    let (h, lens) = DEC_UP1.apply(tape, store, h, &lens)?;
    let (h, lens) = upsample(h.gelu(), &lens)?;
    let (h, lens) = DEC_UP2.apply(tape, store, h, &lens)?;
    Ok(DEC_OUT.apply(tape, store, h.gelu(), &lens)?.0)
}

/// The four scalar terms of the tokenizer objective.
#[derive(Debug, Clone, Copy)]
pub struct VqLoss<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    /// `mean_t ‖sg[z_t] − ẑ_t‖`: reaches only the codebook.
    pub embed: Var<'t>,
    /// `mean_t ‖z_t − sg[ẑ_t]‖`: reaches only the encoder.
    pub commit: Var<'t>,
}

/// Reconstruction MSE plus the two stop-gradient latent distances.
pub fn vq_loss<'t>(x: Var<'t>, x_hat: Var<'t>, z: Var<'t>, z_q: Var<'t>) -> crate::tensor::Result<VqLoss<'t>> {
    let diff = x_hat.sub(x)?;
    let recon = diff.mul(diff)?.mean();
    let commit = z.sub(z_q.detach())?.row_norms().mean();
    let embed = z.detach().sub(z_q)?.row_norms().mean();
    let total = recon.add(commit)?.add(embed)?;
    Ok(VqLoss {
        total,
        recon,
        embed,
        commit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn conv_index_respects_clip_boundaries() {
        let (idx, lens) = conv_index(&[4, 4], 4, 2, 1);
        assert_eq!(lens, vec![2, 2]);
        assert_eq!(&idx[..4], &[None, Some(0), Some(1), Some(2)]);
        assert_eq!(&idx[4..8], &[Some(1), Some(2), Some(3), None]);
        assert_eq!(&idx[8..12], &[None, Some(4), Some(5), Some(6)]);
        let (_, lens) = conv_index(&[5], 3, 1, 1);
        assert_eq!(lens, vec![5]);
    }

    #[test]
    fn vq_loss_vanishes_on_perfect_match() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let zq = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let l = vq_loss(x, x, z, zq).unwrap();
        assert_eq!(l.total.item(), 0.0);
    }

    #[test]
    fn commit_term_leaves_codebook_untouched() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, 0.1, -0.2, 0.4]).unwrap());
        let zq = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::zeros(&[1, 1]));
        let l = vq_loss(x, x, z, zq).unwrap();
        tape.backward(l.commit).unwrap();
        assert!(zq.grad().is_none());
        assert!(z.grad().unwrap().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn loss_gradient_wrt_encoder_output() {
        // Finite differences cannot see stop-gradient, so the oracle is the
        // loss with every sg[.] input frozen at the evaluation point.
        let zq = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.2, 0.9, 0.0, -0.3]).unwrap();
        let target = Tensor::new(vec![2, 3], vec![0.5, 0.2, -0.1, 0.3, 0.3, 0.8]).unwrap();
        let point = Tensor::new(vec![2, 3], vec![0.7, -0.2, 0.6, -0.5, 0.4, 0.1]).unwrap();
        fn oracle<'t>(tape: &'t Tape, z: Var<'t>, zq: &Tensor, target: &Tensor, at: &Tensor) -> crate::tensor::Result<Var<'t>> {
            let q = tape.constant(zq.clone());
            let diff = z.scale(2.0).gelu().sub(tape.constant(target.clone()))?;
            let recon = diff.mul(diff)?.mean();
            let commit = z.sub(q)?.row_norms().mean();
            let embed = tape.constant(at.clone()).sub(q)?.row_norms().mean();
            recon.add(commit)?.add(embed)
        }
        let report = grad_check(|tape, z| oracle(tape, z, &zq, &target, &point), &point, 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");

        let tape = Tape::new();
        let z = tape.leaf(point.clone());
        let l = vq_loss(tape.constant(target.clone()), z.scale(2.0).gelu(), z, tape.constant(zq.clone())).unwrap();
        tape.backward(l.total).unwrap();
        let tape2 = Tape::new();
        let z2 = tape2.leaf(point.clone());
        let o = oracle(&tape2, z2, &zq, &target, &point).unwrap();
        assert!((o.item() - l.total.item()).abs() < 1e-12);
        tape2.backward(o).unwrap();
        for (a, b) in z.grad().unwrap().iter().zip(z2.grad().unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
