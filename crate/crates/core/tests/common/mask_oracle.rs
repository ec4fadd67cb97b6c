//! Per-pixel brute-force reference for the streaming foreground mask.

use tofad::fgmask::MaskParams;

/// Brute-force reference: replays one pixel's whole history from scratch
/// and returns the raw mask bit for the last observation.
pub fn oracle_bit(history: &[u16], p: &MaskParams) -> u8 {
    let mut bg: Option<f64> = None;
    let mut cand = 0.0f64;
    let mut counter = 0u32;
    let mut was_fg = false;
    let mut invalid_run = 0u32;
    let mut drift = 0.0f64;
    let mut bit = 0;
    for (t, &raw) in history.iter().enumerate() {
        if t as u32 % p.n_h_frames == 0 {
            drift = 0.0;
        }
        if raw == 0 {
            invalid_run += 1;
            if invalid_run >= p.n_h_frames {
                bg = None;
                counter = 0;
            }
            was_fg = false;
            bit = 0;
            continue;
        }
        invalid_run = 0;
        let z = raw as f64;
        let b = match bg {
            None => {
                bg = Some(z);
                was_fg = false;
                counter = 0;
                bit = 0;
                continue;
            }
            Some(b) => b,
        };
        let sigma_m = p.k_kinect * (z / 1000.0).powi(2);
        let tau = (p.k * sigma_m * 1000.0).max(p.noise_floor_mm);
        if (z - b).abs() <= tau {
            let nb = b + p.alpha * (z - b);
            if drift + (nb - b).abs() <= p.delta_p_max_mm {
                drift += (nb - b).abs();
                bg = Some(nb);
            }
            was_fg = false;
            counter = 0;
            bit = 0;
            continue;
        }
        counter = if was_fg && (z - cand).abs() <= tau { counter + 1 } else { 0 };
        cand = z;
        if counter >= p.t_w_frames {
            bg = Some(z);
            was_fg = false;
            counter = 0;
            bit = 0;
        } else {
            was_fg = true;
            bit = 1;
        }
    }
    bit
}

pub fn oracle_masks(frames: &[Vec<u16>], p: &MaskParams) -> Vec<Vec<u8>> {
    let npx = frames[0].len();
    (0..frames.len())
        .map(|t| {
            (0..npx)
                .map(|i| {
                    let hist: Vec<u16> = frames[..=t].iter().map(|f| f[i]).collect();
                    oracle_bit(&hist, p)
                })
                .collect()
        })
        .collect()
}
