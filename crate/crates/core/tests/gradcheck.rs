mod common;

#[test]
fn objectives_match_central_differences() {
    let (g, d) = common::gradcheck_micro(300, 11);
    println!("generator: {g:?}\ndiscriminator: {d:?}");
    assert!(g.fraction() >= 0.99, "generator {g:?}");
    assert!(d.fraction() >= 0.99, "discriminator {d:?}");
}
