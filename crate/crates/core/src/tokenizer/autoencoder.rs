use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{
    dequantize, quantize_multiscale, Codebook, FeatureMap, MultiScaleTokens, ScaleSchedule,
};
use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::tensor::{Extent, Tape, Tensor, Var};

/// Shape of the patch autoencoder and its quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Feature channels `C` (equals the codebook width).
    pub channels: usize,
    /// Vocabulary size `V`.
    pub codebook_size: usize,
    /// Hidden width of the residual MLPs.
    pub hidden: usize,
    /// Side lengths of the square scale schedule; the last equals `image_size / patch`.
    pub scales: Vec<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            channels: 16,
            codebook_size: 64,
            hidden: 64,
            scales: vec![1, 2, 4, 6, 8],
        }
    }
}

impl AutoencoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn schedule(&self) -> Result<ScaleSchedule> {
        let s = ScaleSchedule::square(&self.scales)?;
        if s.final_extent() != Extent::new(self.grid(), self.grid()) {
            return Err(contract(format!(
                "last scale {:?} must equal the {0}x{0} feature grid",
                self.grid()
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(contract("image_size must be a positive multiple of patch"));
        }
        if self.channels == 0 || self.hidden == 0 || self.codebook_size < 2 {
            return Err(contract(
                "channels, hidden must be positive and codebook_size >= 2",
            ));
        }
        self.schedule().map(|_| ())
    }
}

const ENC: [&str; 6] = [
    "ae.enc.in.w",
    "ae.enc.in.b",
    "ae.enc.mlp.w1",
    "ae.enc.mlp.b1",
    "ae.enc.mlp.w2",
    "ae.enc.mlp.b2",
];
const DEC: [&str; 6] = [
    "ae.dec.mlp.w1",
    "ae.dec.mlp.b1",
    "ae.dec.mlp.w2",
    "ae.dec.mlp.b2",
    "ae.dec.out.w",
    "ae.dec.out.b",
];
pub(crate) const CODEBOOK: &str = "ae.codebook";

/// Patch encoder/decoder parameters together with the codebook.
#[derive(Clone, Debug)]
pub struct AutoencoderWeights {
    config: AutoencoderConfig,
    schedule: ScaleSchedule,
    params: BTreeMap<String, Tensor>,
    codebook: Codebook,
}

/// Tape handles for every autoencoder tensor.
pub(crate) struct AeVars {
    vars: BTreeMap<&'static str, Var>,
    pub codebook: Var,
}

impl AeVars {
    pub(crate) fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

impl AutoencoderWeights {
    pub fn init<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (p, c, h) = (config.patch_dim(), config.channels, config.hidden);
        let mut params = BTreeMap::new();
        let mut w = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            params.insert(
                name.to_string(),
                Tensor::randn([rows, cols], 1.0 / (rows as f64).sqrt(), rng),
            );
        };
        w("ae.enc.in.w", p, c, rng);
        w("ae.enc.mlp.w1", c, h, rng);
        w("ae.enc.mlp.w2", h, c, rng);
        w("ae.dec.mlp.w1", c, h, rng);
        w("ae.dec.mlp.w2", h, c, rng);
        w("ae.dec.out.w", c, p, rng);
        for (name, n) in [
            ("ae.enc.in.b", c),
            ("ae.enc.mlp.b1", h),
            ("ae.enc.mlp.b2", c),
            ("ae.dec.mlp.b1", h),
            ("ae.dec.mlp.b2", c),
            ("ae.dec.out.b", p),
        ] {
            params.insert(name.to_string(), Tensor::zeros([n]));
        }
        let codebook = Codebook::random(config.codebook_size, c, 0.5, rng);
        let schedule = config.schedule()?;
        Ok(Self {
            config,
            schedule,
            params,
            codebook,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub(crate) fn set_codebook(&mut self, table: Tensor) {
        self.codebook = Codebook::from_trained(table);
    }

    pub fn feature_extent(&self) -> Extent {
        Extent::new(self.config.grid(), self.config.grid())
    }

    /// `[patches x patch_dim]`, patch grid row-major, `(dy, dx, rgb)` inside a patch.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let p = self.config.patch;
        let (hh, ww) = (image.height(), image.width());
        if hh != self.config.image_size || ww != self.config.image_size {
            return Err(contract(format!(
                "image is {hh}x{ww}, tokenizer expects {0}x{0}",
                self.config.image_size
            )));
        }
        if hh % p != 0 || ww % p != 0 {
            return Err(contract(
                "image extents must be divisible by the patch size",
            ));
        }
        let (gh, gw) = (hh / p, ww / p);
        let mut out = Vec::with_capacity(hh * ww * 3);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        out.extend_from_slice(&image.pixel(py * p + dy, px * p + dx));
                    }
                }
            }
        }
        Tensor::new([gh * gw, p * p * 3], out)
    }

    pub fn unpatchify(&self, patches: &Tensor) -> Result<Image> {
        let p = self.config.patch;
        let g = self.config.grid();
        if patches.shape() != [g * g, p * p * 3] {
            return Err(contract("unpatchify: unexpected patch tensor shape"));
        }
        let size = self.config.image_size;
        let mut img = Image::filled(size, size, [0.0; 3]);
        for py in 0..g {
            for px in 0..g {
                let row = patches.row(py * g + px);
                for dy in 0..p {
                    for dx in 0..p {
                        let i = (dy * p + dx) * 3;
                        img.set_pixel(py * p + dy, px * p + dx, [row[i], row[i + 1], row[i + 2]]);
                    }
                }
            }
        }
        Ok(img)
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> AeVars {
        let mut vars = BTreeMap::new();
        for name in ENC.iter().chain(DEC.iter()) {
            vars.insert(*name, tape.leaf(self.params[*name].clone(), trainable));
        }
        let codebook = tape.leaf(self.codebook.table().clone(), trainable);
        AeVars { vars, codebook }
    }

    fn residual_mlp(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        tape.add(x, o)
    }

    pub(crate) fn encode_on(tape: &mut Tape, v: &AeVars, patches: Var) -> Result<Var> {
        let z = tape.matmul(patches, v.get("ae.enc.in.w"))?;
        let z = tape.add_row(z, v.get("ae.enc.in.b"))?;
        Self::residual_mlp(
            tape,
            z,
            v.get("ae.enc.mlp.w1"),
            v.get("ae.enc.mlp.b1"),
            v.get("ae.enc.mlp.w2"),
            v.get("ae.enc.mlp.b2"),
        )
    }

    pub(crate) fn decode_on(tape: &mut Tape, v: &AeVars, f: Var) -> Result<Var> {
        let y = Self::residual_mlp(
            tape,
            f,
            v.get("ae.dec.mlp.w1"),
            v.get("ae.dec.mlp.b1"),
            v.get("ae.dec.mlp.w2"),
            v.get("ae.dec.mlp.b2"),
        )?;
        let out = tape.matmul(y, v.get("ae.dec.out.w"))?;
        tape.add_row(out, v.get("ae.dec.out.b"))
    }

    pub fn encode_image(&self, image: &Image) -> Result<FeatureMap> {
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let x = tape.constant(patches);
        let f = Self::encode_on(&mut tape, &v, x)?;
        Ok(FeatureMap::from_tensor(
            self.feature_extent(),
            tape.value(f).clone(),
        ))
    }

    /// Decoder output clamped to `[0, 1]`.
    pub fn decode_feature(&self, f: &FeatureMap) -> Result<Image> {
        if f.extent() != self.feature_extent() || f.channels() != self.config.channels {
            return Err(contract("decode_feature: feature map shape mismatch"));
        }
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let x = tape.constant(f.to_tensor());
        let out = Self::decode_on(&mut tape, &v, x)?;
        Ok(self.unpatchify(tape.value(out))?.clamp01())
    }

    pub fn tokenize(&self, image: &Image) -> Result<MultiScaleTokens> {
        let f = self.encode_image(image)?;
        quantize_multiscale(&f, &self.codebook, &self.schedule)
    }

    pub fn detokenize(&self, tokens: &MultiScaleTokens) -> Result<Image> {
        let f = dequantize(tokens, &self.codebook, &self.schedule)?;
        self.decode_feature(&f)
    }

    /// Full tokenise/detokenise round trip.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        self.detokenize(&self.tokenize(image)?)
    }

    /// Evaluation embedding: the L2-normalised spatial mean of the encoder
    /// features (colour content) concatenated with the L2-normalised,
    /// mean-centred map of each cell's distance from that mean (layout),
    /// then L2-normalised as a whole.
    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let f = self.encode_image(image)?;
        let c = f.channels();
        let cells = f.extent().area();
        let mut mean = vec![0.0; c];
        for i in 0..cells {
            mean.iter_mut().zip(f.cell(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= cells as f64);
        let mut layout: Vec<f64> = (0..cells)
            .map(|i| {
                f.cell(i)
                    .iter()
                    .zip(&mean)
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let lm = layout.iter().sum::<f64>() / cells as f64;
        layout.iter_mut().for_each(|x| *x -= lm);
        normalize(&mut mean);
        normalize(&mut layout);
        mean.extend(layout);
        if !normalize(&mut mean) {
            return Err(Error::NonFinite("embedding of norm zero".into()));
        }
        Ok(mean)
    }

    /// Named tensors for checkpointing, including a `meta.autoencoder` record.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        out.insert(CODEBOOK.to_string(), self.codebook.table().clone());
        let c = &self.config;
        let mut meta = vec![
            c.image_size as f64,
            c.patch as f64,
            c.channels as f64,
            c.codebook_size as f64,
            c.hidden as f64,
        ];
        meta.extend(c.scales.iter().map(|&s| s as f64));
        out.insert(
            "meta.autoencoder".to_string(),
            Tensor::from_parts(vec![meta.len()], meta),
        );
        out
    }

    pub fn from_tensors(mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let meta = tensors
            .remove("meta.autoencoder")
            .ok_or_else(|| Error::Corrupt("missing meta.autoencoder".into()))?;
        let m = meta.data();
        if m.len() < 6 {
            return Err(Error::Corrupt("meta.autoencoder too short".into()));
        }
        let config = AutoencoderConfig {
            image_size: m[0] as usize,
            patch: m[1] as usize,
            channels: m[2] as usize,
            codebook_size: m[3] as usize,
            hidden: m[4] as usize,
            scales: m[5..].iter().map(|&v| v as usize).collect(),
        };
        config.validate()?;
        let table = tensors
            .remove(CODEBOOK)
            .ok_or_else(|| Error::Corrupt("missing codebook".into()))?;
        if table.shape() != [config.codebook_size, config.channels] {
            return Err(Error::Corrupt(
                "codebook shape disagrees with metadata".into(),
            ));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = Self::init(config.clone(), &mut rng)?;
        let mut params = BTreeMap::new();
        for (name, t) in &reference.params {
            let loaded = tensors
                .remove(name)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` has the wrong shape"
                )));
            }
            params.insert(name.clone(), loaded);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            schedule: config.schedule()?,
            config,
            params,
            codebook: Codebook::from_trained(table),
        })
    }
}

/// Scales `v` to unit length; returns false and leaves `v` alone if it is zero.
fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn weights() -> AutoencoderWeights {
        AutoencoderWeights::init(
            AutoencoderConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
    }

    #[test]
    fn zero_image_encodes_to_zero_features() {
        let ae = weights();
        let f = ae.encode_image(&Image::filled(32, 32, [0.0; 3])).unwrap();
        assert_eq!(f.extent(), Extent::new(8, 8));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_features_decode_to_black() {
        let ae = weights();
        let img = ae
            .decode_feature(&FeatureMap::zeros(Extent::new(8, 8), 16))
            .unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_and_decode_are_deterministic() {
        let ae = weights();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect();
        let img = Image::new(32, 32, data).unwrap();
        let a = ae.encode_image(&img).unwrap();
        let b = ae.encode_image(&img).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(
            ae.decode_feature(&a).unwrap(),
            ae.decode_feature(&b).unwrap()
        );
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let ae = weights();
        assert!(ae.encode_image(&Image::filled(30, 30, [0.0; 3])).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let ae = weights();
        let data = (0..32 * 32 * 3).map(|i| (i % 97) as f64 / 97.0).collect();
        let img = Image::new(32, 32, data).unwrap();
        assert_eq!(ae.unpatchify(&ae.patchify(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn tensor_round_trip() {
        let ae = weights();
        let back = AutoencoderWeights::from_tensors(ae.to_tensors()).unwrap();
        assert_eq!(back.to_tensors(), ae.to_tensors());
    }
}
