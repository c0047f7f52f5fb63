//! Named parameter store shared by the fusion pipeline, encoder stubs and
//! the discriminator. Parameters carry a stable id, a dotted name following
//! the `module.stage.block.param` scheme, a trainable flag and an update
//! group, so freezing and alternating-step training fall out of bookkeeping
//! rather than special cases.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::qmtf;
use crate::tensor::tape::ParamId;
use crate::{Tape, Tensor};

/// Which optimizer updates a parameter: the main pipeline or the adversarial
/// scorer (trained in alternation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Main,
    Disc,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// How a forward pass binds parameters to the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Track trainable parameters of this group; everything else is constant.
    Train(ParamGroup),
    /// Nothing tracked.
    Eval,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name: {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, value, trainable, group });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "parameter shape is fixed");
        self.entries[id.0].value = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Binds the parameter onto a tape according to the binding mode.
    pub fn tracked(&self, tape: &mut Tape, id: ParamId, binding: Binding) -> Result<Tensor> {
        let e = &self.entries[id.0];
        match binding {
            Binding::Train(group) if e.trainable && e.group == group => tape.param(id, &e.value),
            _ => Ok(tape.constant(&e.value)),
        }
    }

    /// Ids of trainable parameters in a group, in insertion order.
    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable && e.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Snapshot of all values, aligned with parameter ids.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = v.clone();
        }
    }

    // ------------------------------------------------------------------
    // Checkpoints: a JSON manifest plus one QMTF file per parameter.
    // ------------------------------------------------------------------

    pub fn save_checkpoint(&self, dir: &Path, config_hash: &str) -> Result<()> {
        let params_dir = dir.join("params");
        fs::create_dir_all(&params_dir)?;
        let mut manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            version: 1,
            config_hash: config_hash.to_string(),
            params: Vec::with_capacity(self.entries.len()),
        };
        for e in &self.entries {
            let file = format!("params/{}.qmtf", e.name);
            qmtf::write_file(&dir.join(&file), &e.value)?;
            manifest.params.push(ManifestParam {
                name: e.name.clone(),
                file,
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            });
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Loads values into an already-constructed store; names and shapes must
    /// match the manifest. Returns the config hash recorded at save time.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<String> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::invalid(format!("unknown checkpoint format {}", manifest.format)));
        }
        if manifest.params.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model has {}",
                manifest.params.len(),
                self.entries.len()
            )));
        }
        for p in &manifest.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {}", p.name)))?;
            let value: Tensor = qmtf::read_file(&dir.join(&p.file))?;
            if value.shape() != p.shape.as_slice()
                || value.shape() != self.entries[id.0].value.shape()
            {
                return Err(Error::invalid(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name,
                    value.shape(),
                    self.entries[id.0].value.shape()
                )));
            }
            self.entries[id.0].value = value;
        }
        Ok(manifest.config_hash)
    }
}

const MANIFEST_FORMAT: &str = "retfuse-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config_hash: String,
    params: Vec<ManifestParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    file: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Result of a sampled finite-difference check over a parameter store.
#[derive(Debug, Clone)]
pub struct StoreGradCheck {
    /// Worst per-parameter relative error (see below).
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Central-difference check of `d loss / d params` for every trainable
/// parameter of a group, sampling up to `coords_per_param` coordinates per
/// tensor.
///
/// Central differences of an O(|L|) loss carry irreducible f64 rounding
/// noise of about |L|·ulp/(2·eps); deviations below a small multiple of that
/// floor are not measurable. The error reported for a parameter is the worst
/// sampled |analytic − numeric| in excess of that floor, normalized by the
/// parameter's full analytic-gradient scale (∞-norm, floored at 1e-8).
/// Parameters with no gradient at all (frozen or unreached) are checked
/// against the noise floor too, which catches missing gradient wiring.
pub fn grad_check_store<FwdT, FwdE>(
    store: &ParamStore,
    group: ParamGroup,
    forward_train: FwdT,
    forward_eval: FwdE,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> crate::Result<StoreGradCheck>
where
    FwdT: Fn(&ParamStore, &mut Tape) -> crate::Result<Tensor>,
    FwdE: Fn(&ParamStore) -> crate::Result<f64>,
{
    use crate::tensor::gradcheck::{relative_error, CoordSample};

    let mut tape = Tape::new();
    let loss = forward_train(store, &mut tape)?;
    let loss_value = loss.item();
    let grads = tape.backward(&loss)?;
    // Ten times the cancellation noise of (L⁺ − L⁻)/(2·eps) in f64.
    let atol = 10.0 * loss_value.abs().max(1.0) * f64::EPSILON / (2.0 * eps);

    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut coords_checked = 0usize;
    for id in store.group_ids(group) {
        let entry = store.entry(id);
        let analytic = grads.param(id);
        let scale = analytic
            .map(|g| g.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
            .unwrap_or(0.0)
            .max(1e-8);
        let coords =
            CoordSample::Subset { n: coords_per_param, seed: seed ^ (id.0 as u64) }
                .pick(entry.value.numel());
        for i in coords {
            let mut probe = store.clone();
            let mut t = probe.value(id).detached();
            t.data_mut()[i] += eps;
            probe.set_value(id, t);
            let plus = forward_eval(&probe)?;
            let mut t = probe.value(id).detached();
            t.data_mut()[i] -= 2.0 * eps;
            probe.set_value(id, t);
            let minus = forward_eval(&probe)?;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "grad_check_store" });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map(|g| g[i]).unwrap_or(0.0);
            let excess = ((a - numeric).abs() - atol).max(0.0);
            // Strict pointwise error where resolvable, tensor-scale error
            // otherwise.
            let err = relative_error(a, numeric).min(excess / scale);
            if err > max_rel_err {
                max_rel_err = err;
                worst_param = format!("{}[{}]", entry.name, i);
            }
            coords_checked += 1;
        }
    }
    Ok(StoreGradCheck { max_rel_err, worst_param, coords_checked })
}

/// Gaussian init scaled like 1/√fan_in.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std)
}

/// FNV-1a over bytes, hex-encoded; used for config and dataset hashes.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_rejects_duplicates_and_tracks_groups() {
        let mut store = ParamStore::new();
        let a = store.add("enc.m0.w", Tensor::zeros(&[2, 2]), true, ParamGroup::Main).unwrap();
        assert!(store.add("enc.m0.w", Tensor::zeros(&[2, 2]), true, ParamGroup::Main).is_err());
        let d = store.add("disc.w", Tensor::zeros(&[2, 2]), true, ParamGroup::Disc).unwrap();
        let f = store.add("enc.m1.w", Tensor::zeros(&[2, 2]), false, ParamGroup::Main).unwrap();
        assert_eq!(store.group_ids(ParamGroup::Main), vec![a]);
        assert_eq!(store.group_ids(ParamGroup::Disc), vec![d]);
        assert_eq!(store.id("enc.m1.w"), Some(f));
    }

    #[test]
    fn binding_controls_gradient_flow() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true, ParamGroup::Main)
            .unwrap();
        let frozen = store
            .add("f", Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap(), false, ParamGroup::Main)
            .unwrap();

        let mut tape = Tape::new();
        let tw = store.tracked(&mut tape, w, Binding::Train(ParamGroup::Main)).unwrap();
        let tf = store.tracked(&mut tape, frozen, Binding::Train(ParamGroup::Main)).unwrap();
        let prod = tape.mul(&tw, &tf).unwrap();
        let loss = tape.sum(&prod).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.param(w).unwrap(), &[3.0, 4.0]);
        assert!(grads.param(frozen).is_none(), "frozen parameters receive no gradient");
    }

    #[test]
    fn checkpoint_round_trip_and_hash_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        for i in 0..4 {
            store
                .add(
                    format!("mod.stage{}.w", i),
                    init_normal(&mut rng, &[3, 2], 0.5),
                    i % 2 == 0,
                    ParamGroup::Main,
                )
                .unwrap();
        }
        let dir = std::env::temp_dir().join(format!("retfuse-ckpt-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        store.save_checkpoint(&dir, "deadbeef").unwrap();

        let mut other = ParamStore::new();
        for i in 0..4 {
            other
                .add(format!("mod.stage{}.w", i), Tensor::zeros(&[3, 2]), i % 2 == 0, ParamGroup::Main)
                .unwrap();
        }
        let hash = other.load_checkpoint(&dir).unwrap();
        assert_eq!(hash, "deadbeef");
        for (a, b) in store.iter().zip(other.iter()) {
            assert_eq!(a.1.value.data(), b.1.value.data());
        }

        // Saving twice produces byte-identical manifests.
        let m1 = fs::read(dir.join("manifest.json")).unwrap();
        store.save_checkpoint(&dir, "deadbeef").unwrap();
        let m2 = fs::read(dir.join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"retfuse"), fnv1a_hex(b"retfuse"));
        assert_ne!(fnv1a_hex(b"a"), fnv1a_hex(b"b"));
    }
}
