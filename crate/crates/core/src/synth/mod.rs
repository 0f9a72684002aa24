//! Synthetic listings with a known latent concept behind both the photo
//! embeddings and the text features.

mod filter;
mod persist;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine, Matrix};

pub use filter::{apply_filters, FilterConfig, FilterStats};
pub use persist::{load_dataset, save_dataset, LISTINGS_FILE, PHOTOS_FILE, TEXT_FILE};

pub const CAPACITY: &str = "capacity";
pub const URBAN_RURAL: &str = "urban_rural";

/// Quartiles of the standard normal, used to bucket capacity.
const CAPACITY_EDGES: [f64; 3] = [-0.674_489_750_196_081_7, 0.0, 0.674_489_750_196_081_7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_listings: usize,
    pub d_latent: usize,
    /// Photo embedding dimension.
    pub d: usize,
    pub d_text: usize,
    pub max_photos: usize,
    pub photo_noise: f64,
    pub text_noise: f64,
    pub aspect_count: usize,
    /// Per-position decay of the latent signal in photos; position `j` is
    /// weighted `salience_decay^j`.
    #[serde(default = "default_decay")]
    pub salience_decay: f64,
    /// Fraction of listings whose text describes an unrelated latent.
    #[serde(default)]
    pub mismatch_fraction: f64,
    #[serde(default = "default_text_length")]
    pub median_text_length: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_decay() -> f64 {
    0.85
}

fn default_text_length() -> f64 {
    200.0
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_listings: 1024,
            d_latent: 8,
            d: 16,
            d_text: 16,
            max_photos: 8,
            photo_noise: 0.1,
            text_noise: 0.1,
            aspect_count: 4,
            salience_decay: default_decay(),
            mismatch_fraction: 0.0,
            median_text_length: default_text_length(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_latent, self.d, self.d_text, self.max_photos];
        if dims.contains(&0) {
            return Err(Error::degenerate("generator dimensions and max_photos must be at least 1"));
        }
        if !(self.photo_noise >= 0.0 && self.text_noise >= 0.0) {
            return Err(Error::degenerate("noise levels must be non-negative"));
        }
        if !(self.salience_decay > 0.0 && self.salience_decay <= 1.0) {
            return Err(Error::degenerate("salience_decay must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mismatch_fraction) {
            return Err(Error::degenerate("mismatch_fraction must lie in [0, 1]"));
        }
        if !(self.median_text_length > 0.0) {
            return Err(Error::degenerate("median_text_length must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListingRecord {
    pub id: u64,
    pub latent: Vec<f64>,
    /// `photo_count x d`, most salient photo first.
    pub photos: Matrix,
    pub photo_count: usize,
    pub text_features: Vec<f64>,
    pub text_length_proxy: usize,
    pub attributes: BTreeMap<String, u32>,
}

impl ListingRecord {
    pub fn mean_photo(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.photos.cols()];
        for row in self.photos.row_iter().take(self.photo_count) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.photo_count as f64);
        mean
    }
}

/// Labels derived from the latent alone.
pub fn attributes_of(latent: &[f64]) -> BTreeMap<String, u32> {
    let c = latent[0];
    let capacity = CAPACITY_EDGES.iter().filter(|&&e| c > e).count() as u32;
    let u = latent.get(1).copied().unwrap_or(c);
    BTreeMap::from([
        (CAPACITY.to_string(), capacity),
        (URBAN_RURAL.to_string(), u32::from(u > 0.0)),
    ])
}

/// The fixed linear maps shared by every listing of a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// `d x d_latent`.
    pub photo_map: Matrix,
    /// `d_text x d_latent`.
    pub text_map: Matrix,
    /// `aspect_count x d`, orthogonal to the range of `photo_map` when room allows.
    pub aspects: Matrix,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * std;
    }
    m
}

fn round_vec(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = f64::from(*x as f32));
}

impl World {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, 0);
        let scale = 1.0 / (cfg.d_latent as f64).sqrt();
        let photo_map = gaussian(&mut rng, cfg.d, cfg.d_latent, scale);
        let text_map = gaussian(&mut rng, cfg.d_text, cfg.d_latent, scale);
        let raw = gaussian(&mut rng, cfg.aspect_count, cfg.d, 1.0);

        let mut aspects = Matrix::zeros(cfg.aspect_count, cfg.d);
        let q = photo_map.to_nalgebra().qr().q();
        for a in 0..cfg.aspect_count {
            let mut v = nalgebra::DVector::from_row_slice(raw.row(a));
            if cfg.d > cfg.d_latent {
                let proj = &q * (q.transpose() * &v);
                v -= proj;
            }
            let n = v.norm();
            if n > 0.0 {
                v /= n;
            }
            aspects.row_mut(a).copy_from_slice(v.as_slice());
        }
        Ok(World {
            photo_map,
            text_map,
            aspects,
        })
    }

    fn pinv(m: &Matrix) -> Result<DMatrix<f64>> {
        m.to_nalgebra()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::degenerate(format!("pseudo-inverse failed: {e}")))
    }

    /// Cosine between the latent read back from the text and from the mean
    /// photo, through the generating maps.
    pub fn prelim_scorer(&self) -> Result<impl Fn(&ListingRecord) -> f64 + Sync + '_> {
        let pp = Self::pinv(&self.photo_map)?;
        let pt = Self::pinv(&self.text_map)?;
        Ok(move |r: &ListingRecord| {
            let zp = &pp * nalgebra::DVector::from_vec(r.mean_photo());
            let zt = &pt * nalgebra::DVector::from_row_slice(&r.text_features);
            cosine(zp.as_slice(), zt.as_slice())
        })
    }
}

fn listing(cfg: &GeneratorConfig, world: &World, i: usize) -> ListingRecord {
    let mut rng = stream(cfg.seed, i as u64 + 1);
    let mut latent: Vec<f64> = (0..cfg.d_latent).map(|_| StandardNormal.sample(&mut rng)).collect();
    round_vec(&mut latent);

    let spread: f64 = Normal::new(0.0, cfg.max_photos as f64 / 4.0)
        .expect("positive std")
        .sample(&mut rng);
    let photo_count = cfg.max_photos.saturating_sub(spread.abs().floor() as usize).max(1);

    let signal: Vec<f64> = (0..cfg.d)
        .map(|r| crate::linalg::dot(world.photo_map.row(r), &latent))
        .collect();
    let mut photos = Matrix::zeros(photo_count, cfg.d);
    let mut salience = 1.0;
    for j in 0..photo_count {
        let aspect = (cfg.aspect_count > 0).then(|| world.aspects.row(j % cfg.aspect_count));
        for (c, v) in photos.row_mut(j).iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = salience * signal[c] + aspect.map_or(0.0, |a| a[c]) + cfg.photo_noise * noise;
        }
        salience *= cfg.salience_decay;
    }
    photos.round_to_f32();

    let mismatch = rng.random::<f64>() < cfg.mismatch_fraction;
    let text_latent: Vec<f64> = if mismatch {
        (0..cfg.d_latent).map(|_| StandardNormal.sample(&mut rng)).collect()
    } else {
        latent.clone()
    };
    let mut text_features: Vec<f64> = (0..cfg.d_text)
        .map(|r| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            crate::linalg::dot(world.text_map.row(r), &text_latent) + cfg.text_noise * noise
        })
        .collect();
    round_vec(&mut text_features);

    let log_len: f64 = Normal::new(cfg.median_text_length.ln(), 0.6)
        .expect("positive std")
        .sample(&mut rng);
    let text_length_proxy = log_len.exp().round() as usize;

    ListingRecord {
        id: i as u64,
        attributes: attributes_of(&latent),
        latent,
        photos,
        photo_count,
        text_features,
        text_length_proxy,
    }
}

/// Generates `cfg.n_listings` records; listing `i` draws from its own
/// random stream, so the result does not depend on thread scheduling.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<ListingRecord>> {
    let world = World::new(cfg)?;
    Ok((0..cfg.n_listings)
        .into_par_iter()
        .map(|i| listing(cfg, &world, i))
        .collect())
}

/// Seeded random split; the holdout gets `max(1, floor(n * fraction))`
/// records. Both sides keep their input order.
pub fn split(
    records: Vec<ListingRecord>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<ListingRecord>, Vec<ListingRecord>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::degenerate(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let n = records.len();
    let n_holdout = ((n as f64 * holdout_fraction).floor() as usize).max(1);
    if n_holdout >= n {
        return Err(Error::degenerate(format!("cannot split {n} records into two non-empty sides")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut is_holdout = vec![false; n];
    for &i in &order[..n_holdout] {
        is_holdout[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_holdout);
    let mut holdout = Vec::with_capacity(n_holdout);
    for (r, h) in records.into_iter().zip(is_holdout) {
        if h {
            holdout.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((train, holdout))
}
