//! Show which channels move where under the temporal shift, on a clip whose
//! values encode their own segment index.
//!
//! cargo run --example temporal_shift -- [SEGMENTS] [CHANNELS] [SHIFT_DIV]

use ear_tsm::shift::{temporal_shift, temporal_shift_adjoint};
use ear_tsm::tensor::Tensor;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn print_grid(title: &str, x: &Tensor, t: usize, c: usize) {
    println!("{title}");
    print!("      ");
    for ti in 0..t {
        print!(" t={ti:<3}");
    }
    println!();
    for ci in 0..c {
        print!("c{ci:<4}");
        for ti in 0..t {
            let v = x.data()[ti * c + ci];
            if v == 0.0 {
                print!("    . ");
            } else {
                print!(" {v:>4} ");
            }
        }
        println!();
    }
}

fn main() -> ear_tsm::Result<()> {
    let t = arg(1, 5);
    let c = arg(2, 8);
    let div = arg(3, 4);
    // value = 10 * (segment + 1) + channel, one pixel per frame
    let data = (0..t)
        .flat_map(|ti| (0..c).map(move |ci| (10 * (ti + 1) + ci) as f64))
        .collect();
    let x = Tensor::new(vec![1, t, c, 1, 1], data)?;
    let fold = c / div;
    println!("{t} segments, {c} channels, shift_div {div}: fold {fold}");
    println!("channels [0, {fold}) read from t+1, [{fold}, {}) from t-1\n", 2 * fold);
    print_grid("input", &x, t, c);
    println!();
    print_grid("shifted", &temporal_shift(&x, div)?, t, c);
    println!();
    print_grid("adjoint of the input", &temporal_shift_adjoint(&x, div)?, t, c);
    Ok(())
}
