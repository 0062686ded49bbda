//! The closed-world evaluation proxies, calibrated on clean renders.
//!
//! Subject fidelity compares a generated image's detected foreground against
//! the reference subject (palette histogram + shape-template correlation);
//! prompt fidelity scores the four caption attributes 0/1 with deterministic
//! extractors. On procedurally rendered targets both behave as near-perfect
//! oracles, which is what makes them a usable yardstick for generations.
//!
//! Run with: cargo run --release --example evaluate_proxies

use bootpig::databoot::{self, SUBJECT_COLORS};
use bootpig::metrics::{heldout_scenes, prompt_fidelity, subject_fidelity};
use bootpig::Result;

fn main() -> Result<()> {
    let corpus = heldout_scenes(200, 7, 32)?;

    // calibration: ground-truth targets scored as if they were generations
    let mut subj = 0.0;
    let mut perfect_prompts = 0usize;
    for t in &corpus {
        subj += subject_fidelity(&t.target, &t.reference, &t.mask)?.score;
        if prompt_fidelity(&t.target, &t.caption)?.score == 1.0 {
            perfect_prompts += 1;
        }
    }
    println!("mean self-match subject_fidelity: {:.4}", subj / corpus.len() as f64);
    println!(
        "targets scoring prompt_fidelity 1.0: {perfect_prompts}/{}",
        corpus.len()
    );

    // degradation behaves sensibly: recoloring the subject halves the score
    let t = &corpus[0];
    let attrs = databoot::CaptionAttrs::decode(&t.caption)?;
    let mut recolored = t.target.clone();
    let (r, g, b) = SUBJECT_COLORS[(attrs.color + 4) % SUBJECT_COLORS.len()];
    for y in 0..recolored.height {
        for x in 0..recolored.width {
            if t.mask.get(x, y, 0) > 0 {
                recolored.set(x, y, 0, r);
                recolored.set(x, y, 1, g);
                recolored.set(x, y, 2, b);
            }
        }
    }
    let s = subject_fidelity(&recolored, &t.reference, &t.mask)?;
    println!(
        "\nrecolored subject: score {:.3} (color {:.3}, shape {:.3})",
        s.score, s.color_score, s.shape_score
    );

    // a blank canvas scores zero with an explicit flag
    let blank = databoot::ImageU8::new(32, 32, 3, 255);
    let s = subject_fidelity(&blank, &t.reference, &t.mask)?;
    println!("blank image: score {} (no_foreground = {})", s.score, s.no_foreground);

    // per-attribute breakdown for a deliberately wrong caption
    let wrong = databoot::CaptionAttrs { color: (attrs.color + 1) % 8, ..attrs };
    let p = prompt_fidelity(&t.target, &wrong.encode())?;
    println!(
        "\nwrong-color caption: score {:.2} (color {} shape {} relation {} background {})",
        p.score, p.color, p.shape, p.relation, p.background
    );
    Ok(())
}
