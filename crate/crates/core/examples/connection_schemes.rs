//! The composition rules on hand-sized tensors.

use deltalogit::compose::{cascade_input, compose_logits, proxy_delta, ConnectionScheme};
use deltalogit::{Result, Tensor};

fn show(name: &str, t: &Tensor) {
    println!("{name:>16}: {:?}", t.to_vec());
}

fn main() -> Result<()> {
    let z_base = Tensor::from_vec(vec![2.0, 0.0, -1.0], &[1, 3])?;
    let z_delta = Tensor::from_vec(vec![-1.0, 1.5, 0.0], &[1, 3])?.with_requires_grad(true);
    let z_post = compose_logits(&z_base, &z_delta)?;
    show("residual", &z_post);

    let p = z_base.softmax_rows()?;
    let w_e = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2])?;
    let h = Tensor::from_vec(vec![0.5, -0.5], &[1, 2])?;
    show("p_base", &p);
    show("cascade", &cascade_input(&p, &w_e, &h, ConnectionScheme::Cascade)?);
    show("cascade+", &cascade_input(&p, &w_e, &h, ConnectionScheme::CascadePlus)?);

    let z_expert = Tensor::from_vec(vec![1.0, 3.0, 0.0], &[1, 3])?;
    show("proxy delta", &proxy_delta(&z_expert, &z_base)?);

    z_post.sum().backward()?;
    println!("gradient reaches delta only: {:?}", z_delta.grad());
    for s in ["residual", "cascade", "cascade+", "probe", "proxy"] {
        println!("{s:>9} parses as {}", ConnectionScheme::parse(s)?.name());
    }
    Ok(())
}
