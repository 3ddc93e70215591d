//! The trainable feature extractor, its EMA momentum copy, and the
//! per-domain feature stores used by alignment.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{l2_normalize, l2_normalize_vjp};
use crate::nn::{Backbone, BackboneKind};
use crate::rng::gauss;
use crate::types::{DomainId, Embedding, ImageRecord, RecordId};

/// Image encoder: pluggable backbone, linear projection into the
/// prompt-token space, L2 normalization. The same normalized vector is
/// the prompt's object token and the retrieval feature.
pub struct Encoder {
    backbone: Box<dyn Backbone>,
    /// `d_tok x d_feat`
    proj_w: Array2<f64>,
    proj_b: Array1<f64>,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Encoder {
            backbone: self.backbone.clone(),
            proj_w: self.proj_w.clone(),
            proj_b: self.proj_b.clone(),
        }
    }
}

impl Encoder {
    pub fn new(backbone: Box<dyn Backbone>, d_tok: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_feat = backbone.out_dim();
        let std = (1.0 / d_feat as f64).sqrt();
        let proj_w = Array2::from_shape_simple_fn((d_tok, d_feat), || gauss(rng) * std);
        Encoder { backbone, proj_w, proj_b: Array1::zeros(d_tok) }
    }

    /// Rebuild an encoder of known architecture with zeroed parameters;
    /// used by checkpoint loading before `set_params`.
    pub fn empty(kind: BackboneKind, d_tok: usize) -> Self {
        let backbone = kind.build_empty();
        let d_feat = backbone.out_dim();
        Encoder { backbone, proj_w: Array2::zeros((d_tok, d_feat)), proj_b: Array1::zeros(d_tok) }
    }

    pub fn backbone_kind(&self) -> BackboneKind {
        self.backbone.kind()
    }

    pub fn d_tok(&self) -> usize {
        self.proj_b.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.backbone.input_shape()
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.proj_w.len() + self.proj_b.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = self.backbone.params();
        out.extend(self.proj_w.iter());
        out.extend(self.proj_b.iter());
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "encoder parameter count mismatch");
        let nb = self.backbone.num_params();
        self.backbone.set_params(&flat[..nb]);
        let nw = self.proj_w.len();
        self.proj_w
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&flat[nb..nb + nw]);
        self.proj_b
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&flat[nb + nw..]);
    }

    fn check_shape(&self, image: &Array3<f64>) -> Result<()> {
        let got = image.dim();
        let want = self.backbone.input_shape();
        if got != want {
            return Err(Error::validation(format!(
                "image shape {got:?} does not match encoder input {want:?}"
            )));
        }
        Ok(())
    }

    /// Unit-norm embedding of one image.
    pub fn encode(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_shape(image)?;
        let feat = self.backbone.forward(image);
        let pre = self.proj_w.dot(&feat) + &self.proj_b;
        Ok(l2_normalize(&pre.view()))
    }

    pub fn encode_record(&self, rec: &ImageRecord) -> Result<Embedding> {
        let values = self.encode(&rec.pixels)?;
        Ok(Embedding::new(values, rec.domain_id, rec.record_id))
    }

    /// Embeddings of a batch, one row per image.
    pub fn encode_batch(&self, images: &[&Array3<f64>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.d_tok()));
        for (i, img) in images.iter().enumerate() {
            let z = self.encode(img)?;
            out.row_mut(i).assign(&z);
        }
        Ok(out)
    }

    /// Gradient of a scalar loss w.r.t. all encoder parameters, given the
    /// loss gradient w.r.t. each batch embedding. Accumulation runs in
    /// batch index order so results are bit-stable.
    pub fn param_grad_batch(&self, images: &[&Array3<f64>], grad_z: &Array2<f64>) -> Result<Vec<f64>> {
        if images.len() != grad_z.nrows() {
            return Err(Error::validation(format!(
                "batch of {} images but {} gradient rows",
                images.len(),
                grad_z.nrows()
            )));
        }
        let mut total = vec![0.0; self.num_params()];
        let nb = self.backbone.num_params();
        let nw = self.proj_w.len();
        let d_feat = self.backbone.out_dim();
        for (i, img) in images.iter().enumerate() {
            self.check_shape(img)?;
            let feat = self.backbone.forward(img);
            let pre = self.proj_w.dot(&feat) + &self.proj_b;
            let g_pre = l2_normalize_vjp(&pre.view(), &grad_z.row(i));
            // projection weight and bias
            for r in 0..self.d_tok() {
                let g = g_pre[r];
                if g != 0.0 {
                    for c in 0..d_feat {
                        total[nb + r * d_feat + c] += g * feat[c];
                    }
                }
                total[nb + nw + r] += g;
            }
            // pull back into the backbone
            let g_feat = self.proj_w.t().dot(&g_pre);
            let g_bb = self.backbone.param_grad(img, &g_feat);
            for (slot, g) in total[..nb].iter_mut().zip(g_bb) {
                *slot += g;
            }
        }
        Ok(total)
    }
}

/// EMA copy of the encoder providing stable targets.
pub struct MomentumEncoder {
    inner: Encoder,
}

impl Clone for MomentumEncoder {
    fn clone(&self) -> Self {
        MomentumEncoder { inner: self.inner.clone() }
    }
}

impl MomentumEncoder {
    /// Initialize from the current encoder parameters.
    pub fn from_encoder(enc: &Encoder) -> Self {
        MomentumEncoder { inner: enc.clone() }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.inner
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.inner
    }

    pub fn encode(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        self.inner.encode(image)
    }

    pub fn encode_record(&self, rec: &ImageRecord) -> Result<Embedding> {
        self.inner.encode_record(rec)
    }
}

/// EMA update `p_m <- m * p_m + (1 - m) * p_theta` over every parameter.
pub fn momentum_update(enc: &Encoder, menc: &mut MomentumEncoder, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::validation(format!("momentum coefficient must be in [0,1], got {m}")));
    }
    if enc.num_params() != menc.inner.num_params() {
        return Err(Error::validation(format!(
            "parameter shapes differ: encoder {} vs momentum {}",
            enc.num_params(),
            menc.inner.num_params()
        )));
    }
    let src = enc.params();
    let mut dst = menc.inner.params();
    for (pm, pt) in dst.iter_mut().zip(src.iter()) {
        *pm = m * *pm + (1.0 - m) * *pt;
    }
    menc.inner.set_params(&dst);
    Ok(())
}

/// Per-domain FIFO store of momentum features: the negatives pool and
/// positive-key source of the contrastive losses.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    domain_id: DomainId,
    capacity: usize,
    buf: Vec<(RecordId, Array1<f64>)>,
    /// Next overwrite position once the buffer is full.
    cursor: usize,
}

impl FeatureBank {
    pub fn new(domain_id: DomainId, capacity: usize) -> Self {
        assert!(capacity >= 1, "bank capacity must be ≥ 1");
        FeatureBank { domain_id, capacity, buf: Vec::new(), cursor: 0 }
    }

    pub fn domain_id(&self) -> DomainId {
        self.domain_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn push_one(&mut self, record_id: RecordId, values: Array1<f64>) {
        if self.buf.len() < self.capacity {
            self.buf.push((record_id, values));
        } else {
            self.buf[self.cursor] = (record_id, values);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Entries oldest-first.
    pub fn fifo_entries(&self) -> impl Iterator<Item = &(RecordId, Array1<f64>)> {
        let split = if self.buf.len() < self.capacity { 0 } else { self.cursor };
        self.buf[split..].iter().chain(self.buf[..split].iter())
    }

    /// Feature matrix in FIFO slot order (row index == slot index).
    pub fn features_matrix(&self, d_tok: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.buf.len(), d_tok));
        for (row, (_, v)) in self.fifo_entries().enumerate() {
            out.row_mut(row).assign(v);
        }
        out
    }

    /// FIFO slot of the most recent entry for `record_id`, if resident.
    pub fn latest_slot_of(&self, record_id: RecordId) -> Option<usize> {
        let entries: Vec<&(RecordId, Array1<f64>)> = self.fifo_entries().collect();
        entries.iter().rposition(|(id, _)| *id == record_id)
    }
}

/// Append embeddings FIFO; oldest entries are evicted once capacity is
/// reached. All entries must be unit-norm and from the bank's domain.
pub fn bank_push(bank: &mut FeatureBank, entries: &[Embedding]) -> Result<()> {
    for e in entries {
        if e.owner.0 != bank.domain_id {
            return Err(Error::validation(format!(
                "cannot push domain {} embedding into domain {} bank",
                e.owner.0, bank.domain_id
            )));
        }
        e.check_unit_norm()?;
    }
    for e in entries {
        bank.push_one(e.owner.1, e.values.clone());
    }
    Ok(())
}

/// Dense momentum-feature table over a whole domain, refreshed once per
/// epoch; the substrate for the dataset-level neighbor graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct FullFeatureTable {
    pub domain_id: DomainId,
    /// Row index == record id.
    pub features: Array2<f64>,
    /// Epoch the table was refreshed at.
    pub epoch: usize,
}

impl FullFeatureTable {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn row(&self, record_id: RecordId) -> ArrayView1<'_, f64> {
        self.features.row(record_id)
    }
}

/// Encode every record of a domain with the momentum encoder.
pub fn refresh_feature_table(
    menc: &MomentumEncoder,
    records: &[ImageRecord],
    epoch: usize,
) -> Result<FullFeatureTable> {
    let d_tok = menc.encoder().d_tok();
    let mut features = Array2::zeros((records.len(), d_tok));
    let mut domain_id = 0;
    for (i, rec) in records.iter().enumerate() {
        if rec.record_id != i {
            return Err(Error::validation(format!(
                "record ids must be dense: position {i} holds record {}",
                rec.record_id
            )));
        }
        domain_id = rec.domain_id;
        let z = menc.encode(&rec.pixels)?;
        features.row_mut(i).assign(&z);
    }
    Ok(FullFeatureTable { domain_id, features, epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvBackbone;
    use crate::rng::{derive_rng, stream};
    use ndarray::array;
    use rand::Rng;

    fn small_encoder(seed: u64) -> Encoder {
        let mut rng = derive_rng(seed, &[stream::INIT]);
        let bb = ConvBackbone::new(4, 4, 3, 2, &mut rng);
        Encoder::new(Box::new(bb), 6, &mut rng)
    }

    fn random_image(rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_simple_fn((4, 4, 3), || rng.gen::<f64>())
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let enc = small_encoder(1);
        let mut rng = derive_rng(2, &[stream::INIT]);
        for _ in 0..50 {
            let img = random_image(&mut rng);
            let z1 = enc.encode(&img).unwrap();
            let z2 = enc.encode(&img).unwrap();
            assert_eq!(z1, z2);
            assert!((z1.dot(&z1).sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let enc = small_encoder(1);
        let img = Array3::zeros((5, 4, 3));
        assert!(enc.encode(&img).is_err());
    }

    #[test]
    fn cosine_range_between_two_images() {
        let enc = small_encoder(1);
        let mut rng = derive_rng(3, &[stream::INIT]);
        let a = enc.encode(&random_image(&mut rng)).unwrap();
        let b = enc.encode(&random_image(&mut rng)).unwrap();
        let cos = a.dot(&b);
        assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&cos));
    }

    #[test]
    fn encoder_param_grad_matches_finite_differences() {
        let enc = small_encoder(4);
        let mut rng = derive_rng(5, &[stream::INIT]);
        let img = random_image(&mut rng);
        // scalar loss: dot of embedding with a fixed cotangent
        let cot = Array1::from_shape_fn(enc.d_tok(), |i| ((i * 3 + 1) as f64).sin());
        let grad_z = {
            let mut g = Array2::zeros((1, enc.d_tok()));
            g.row_mut(0).assign(&cot);
            g
        };
        let analytic = enc.param_grad_batch(&[&img], &grad_z).unwrap();
        let params = enc.params();
        let f = |flat: &[f64]| {
            let mut e = enc.clone();
            e.set_params(flat);
            e.encode(&img).unwrap().dot(&cot)
        };
        for i in (0..params.len()).step_by(17) {
            let mut p = params.clone();
            let h = 1e-6;
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn momentum_update_is_exact_ema() {
        let enc = small_encoder(6);
        let mut menc = MomentumEncoder::from_encoder(&small_encoder(7));
        let before = menc.encoder().params();
        let src = enc.params();
        momentum_update(&enc, &mut menc, 0.999).unwrap();
        let after = menc.encoder().params();
        for i in 0..before.len() {
            let expect = 0.999 * before[i] + (1.0 - 0.999) * src[i];
            assert_eq!(after[i], expect, "param {i} deviates from the EMA formula");
        }
    }

    #[test]
    fn momentum_update_extremes() {
        let enc = small_encoder(8);
        let mut menc = MomentumEncoder::from_encoder(&small_encoder(9));
        momentum_update(&enc, &mut menc, 0.0).unwrap();
        assert_eq!(menc.encoder().params(), enc.params());

        let frozen = menc.encoder().params();
        momentum_update(&small_encoder(10), &mut menc, 1.0).unwrap();
        assert_eq!(menc.encoder().params(), frozen);
    }

    #[test]
    fn momentum_scalar_case() {
        // p_m = 1.0, p_theta = 0.0, m = 0.999 -> 0.999
        assert_eq!(0.999 * 1.0 + (1.0 - 0.999) * 0.0, 0.999);
    }

    #[test]
    fn bank_fifo_eviction() {
        let mut bank = FeatureBank::new(0, 2);
        let e = |r: usize| Embedding::new(array![1.0, 0.0], 0, r);
        bank_push(&mut bank, &[e(0), e(1), e(2)]).unwrap();
        let ids: Vec<usize> = bank.fifo_entries().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn bank_rejects_cross_domain_push() {
        let mut bank = FeatureBank::new(0, 4);
        let foreign = Embedding::new(array![1.0, 0.0], 1, 0);
        assert!(bank_push(&mut bank, &[foreign]).is_err());
    }

    #[test]
    fn bank_batch_counting() {
        let mut bank = FeatureBank::new(0, 4096);
        for batch in 0..10 {
            let entries: Vec<Embedding> =
                (0..64).map(|i| Embedding::new(array![0.0, 1.0], 0, batch * 64 + i)).collect();
            bank_push(&mut bank, &entries).unwrap();
        }
        assert_eq!(bank.len(), 640);
    }

    #[test]
    fn latest_slot_prefers_newest_copy() {
        let mut bank = FeatureBank::new(0, 3);
        let e = |r: usize, v: f64| {
            Embedding::new(l2_normalize(&array![v, 1.0].view()), 0, r)
        };
        bank_push(&mut bank, &[e(0, 0.1), e(1, 0.2), e(0, 0.3)]).unwrap();
        // FIFO order: [rec0(old), rec1, rec0(new)]
        assert_eq!(bank.latest_slot_of(0), Some(2));
        assert_eq!(bank.latest_slot_of(1), Some(1));
        assert_eq!(bank.latest_slot_of(9), None);
    }

    #[test]
    fn feature_table_refresh_is_deterministic() {
        let menc = MomentumEncoder::from_encoder(&small_encoder(11));
        let mut rng = derive_rng(12, &[stream::INIT]);
        let records: Vec<ImageRecord> = (0..5)
            .map(|i| ImageRecord::new(i, 0, random_image(&mut rng), Some(0)))
            .collect();
        let t1 = refresh_feature_table(&menc, &records, 3).unwrap();
        let t2 = refresh_feature_table(&menc, &records, 3).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 5);
        assert_eq!(t1.epoch, 3);
        for i in 0..5 {
            let r = t1.row(i);
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
        }
    }
}
