//! Versioned flat binary snapshots of parameters + dual variable + optimizer
//! state. Round trips are bit-exact: every float is stored as its raw u64
//! bits, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::train::{OptimConfig, OptimState};
use super::{Activation, BackboneConfig, BackboneError, PolicyParams};

const MAGIC: &[u8; 8] = b"ATRCKPT\0";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    put_u64(w, v.to_bits())
}

fn put_u8(w: &mut impl Write, v: u8) -> std::io::Result<()> {
    w.write_all(&[v])
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_usize(r: &mut impl Read) -> Result<usize, BackboneError> {
    let v = get_u64(r)?;
    usize::try_from(v)
        .map_err(|_| BackboneError::CheckpointFormat(format!("size field {v} overflows usize")))
}

fn get_bool(r: &mut impl Read) -> Result<bool, BackboneError> {
    match get_u8(r)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(BackboneError::CheckpointFormat(format!(
            "boolean field holds {other}"
        ))),
    }
}

fn put_vec(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    put_u64(w, v.len() as u64)?;
    for x in v {
        put_f64(w, *x)?;
    }
    Ok(())
}

fn get_vec(r: &mut impl Read, cap: usize) -> Result<Vec<f64>, BackboneError> {
    let len = get_usize(r)?;
    if len > cap {
        return Err(BackboneError::CheckpointFormat(format!(
            "vector length {len} exceeds plausible bound {cap}"
        )));
    }
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(get_f64(r)?);
    }
    Ok(v)
}

/// Largest parameter vector a checkpoint may claim; guards allocation on
/// corrupt length fields.
const MAX_THETA: usize = 1 << 26;

/// Writes a snapshot of `(params, opt)` tagged with the caller's run-config
/// hash.
pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    opt: &OptimState,
    config_hash: u64,
) -> Result<(), BackboneError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u64(&mut w, config_hash)?;

    let cfg = params.config();
    for dim in [
        cfg.state_dim,
        cfg.action_dim,
        cfg.embed_dim,
        cfg.n_layers,
        cfg.n_heads,
        cfg.mlp_hidden,
        cfg.context_steps,
    ] {
        put_u64(&mut w, dim as u64)?;
    }
    put_u8(&mut w, cfg.use_positional as u8)?;
    put_u8(
        &mut w,
        match cfg.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        },
    )?;
    put_u8(&mut w, cfg.bias_every_layer as u8)?;
    put_f64(&mut w, cfg.init_std)?;
    put_f64(&mut w, cfg.logsig_min)?;
    put_f64(&mut w, cfg.logsig_max)?;

    put_f64(&mut w, params.beta_entropy)?;
    put_f64(&mut w, params.lambda)?;
    put_vec(&mut w, params.theta())?;

    let ocfg = opt.config();
    put_f64(&mut w, ocfg.lr)?;
    put_u64(&mut w, ocfg.warmup_steps)?;
    put_u8(&mut w, ocfg.use_moments as u8)?;
    put_f64(&mut w, ocfg.beta1)?;
    put_f64(&mut w, ocfg.beta2)?;
    put_f64(&mut w, ocfg.eps)?;
    put_f64(&mut w, ocfg.dual_lr)?;
    put_u64(&mut w, opt.step)?;
    put_vec(&mut w, &opt.m)?;
    put_vec(&mut w, &opt.v)?;
    w.flush()?;
    Ok(())
}

/// Reads a snapshot. When `expected_config_hash` is given, a stored hash that
/// differs is an error — the checkpoint belongs to a different run setup.
/// Returns the params, optimizer state, and the stored hash.
pub fn load_checkpoint(
    path: &Path,
    expected_config_hash: Option<u64>,
) -> Result<(PolicyParams, OptimState, u64), BackboneError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BackboneError::CheckpointFormat(
            "bad magic; not a checkpoint file".into(),
        ));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(BackboneError::CheckpointFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let stored_hash = get_u64(&mut r)?;
    if let Some(expect) = expected_config_hash {
        if expect != stored_hash {
            return Err(BackboneError::CheckpointFormat(format!(
                "config hash {stored_hash:#018x} does not match the current run's {expect:#018x}"
            )));
        }
    }

    let state_dim = get_usize(&mut r)?;
    let action_dim = get_usize(&mut r)?;
    let embed_dim = get_usize(&mut r)?;
    let n_layers = get_usize(&mut r)?;
    let n_heads = get_usize(&mut r)?;
    let mlp_hidden = get_usize(&mut r)?;
    let context_steps = get_usize(&mut r)?;
    let use_positional = get_bool(&mut r)?;
    let activation = match get_u8(&mut r)? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => {
            return Err(BackboneError::CheckpointFormat(format!(
                "unknown activation tag {other}"
            )))
        }
    };
    let bias_every_layer = get_bool(&mut r)?;
    let init_std = get_f64(&mut r)?;
    let logsig_min = get_f64(&mut r)?;
    let logsig_max = get_f64(&mut r)?;
    let cfg = BackboneConfig {
        state_dim,
        action_dim,
        embed_dim,
        n_layers,
        n_heads,
        mlp_hidden,
        context_steps,
        use_positional,
        activation,
        bias_every_layer,
        init_std,
        logsig_min,
        logsig_max,
    };
    cfg.validate()
        .map_err(|e| BackboneError::CheckpointFormat(format!("stored config invalid: {e}")))?;

    let beta_entropy = get_f64(&mut r)?;
    let lambda = get_f64(&mut r)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(BackboneError::CheckpointFormat(format!(
            "stored dual variable {lambda} is invalid"
        )));
    }
    let theta = get_vec(&mut r, MAX_THETA)?;

    let ranges = super::ParamRanges::build(&cfg);
    if theta.len() != ranges.total {
        return Err(BackboneError::CheckpointFormat(format!(
            "theta holds {} values but the stored config needs {}",
            theta.len(),
            ranges.total
        )));
    }
    let params = PolicyParams {
        cfg,
        ranges,
        theta,
        lambda,
        beta_entropy,
    };

    let lr = get_f64(&mut r)?;
    let warmup_steps = get_u64(&mut r)?;
    let use_moments = get_bool(&mut r)?;
    let beta1 = get_f64(&mut r)?;
    let beta2 = get_f64(&mut r)?;
    let eps = get_f64(&mut r)?;
    let dual_lr = get_f64(&mut r)?;
    let ocfg = OptimConfig {
        lr,
        warmup_steps,
        use_moments,
        beta1,
        beta2,
        eps,
        dual_lr,
    };
    ocfg.validate()
        .map_err(|e| BackboneError::CheckpointFormat(format!("stored optimizer invalid: {e}")))?;
    let step = get_u64(&mut r)?;
    let m = get_vec(&mut r, MAX_THETA)?;
    let v = get_vec(&mut r, MAX_THETA)?;
    let expect_len = if use_moments { params.n_params() } else { 0 };
    if m.len() != expect_len || v.len() != expect_len {
        return Err(BackboneError::CheckpointFormat(format!(
            "moment vectors have lengths {} / {}, expected {expect_len}",
            m.len(),
            v.len()
        )));
    }
    let opt = OptimState::rebuild(ocfg, step, m, v);

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(BackboneError::CheckpointFormat(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok((params, opt, stored_hash))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::*;
    use super::*;
    use std::fs;

    fn trained_pair() -> (PolicyParams, OptimState) {
        let mut params = toy_params(7);
        params.lambda = 0.25;
        let batch = vec![random_window(params.config(), 8)];
        let mut opt = OptimState::new(OptimConfig::default(), params.n_params()).unwrap();
        for _ in 0..5 {
            train_step(&mut params, &batch, None, &mut opt).unwrap();
        }
        (params, opt)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let (params, opt) = trained_pair();
        save_checkpoint(&path, &params, &opt, 0xDEAD_BEEF).unwrap();
        let (loaded, lopt, hash) = load_checkpoint(&path, Some(0xDEAD_BEEF)).unwrap();
        assert_eq!(hash, 0xDEAD_BEEF);
        assert_eq!(loaded.n_params(), params.n_params());
        for (a, b) in loaded.theta().iter().zip(params.theta()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.lambda.to_bits(), params.lambda.to_bits());
        assert_eq!(loaded.beta_entropy.to_bits(), params.beta_entropy.to_bits());
        assert_eq!(lopt.step, opt.step);
        for (a, b) in lopt.m.iter().zip(&opt.m) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in lopt.v.iter().zip(&opt.v) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // a reload continues training identically to the original.
        let batch = vec![random_window(params.config(), 8)];
        let mut p1 = params.clone();
        let mut o1 = opt.clone();
        let mut p2 = loaded;
        let mut o2 = lopt;
        train_step(&mut p1, &batch, None, &mut o1).unwrap();
        train_step(&mut p2, &batch, None, &mut o2).unwrap();
        assert_eq!(p1.theta(), p2.theta());
    }

    #[test]
    fn config_hash_mismatch_is_rejected_but_unchecked_load_passes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let (params, opt) = trained_pair();
        save_checkpoint(&path, &params, &opt, 42).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(43)),
            Err(BackboneError::CheckpointFormat(_))
        ));
        let (_, _, hash) = load_checkpoint(&path, None).unwrap();
        assert_eq!(hash, 42);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let (params, opt) = trained_pair();
        save_checkpoint(&path, &params, &opt, 1).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(BackboneError::CheckpointFormat(_))
        ));

        let good = {
            save_checkpoint(&path, &params, &opt, 1).unwrap();
            fs::read(&path).unwrap()
        };
        fs::write(&path, &good[..good.len() - 9]).unwrap();
        assert!(load_checkpoint(&path, None).is_err());

        // trailing garbage is also an error.
        let mut padded = good;
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(BackboneError::CheckpointFormat(_))
        ));
    }
}
