//! Check the hand-written gradients, then attack a trained toy model.

use adapter_mixer::toybench::{
    evaluate, fgsm_perturb, grad_check, make_domain, train_adapter, AdapterParams, Attack, Backbone,
    DomainSpec, Head, ToyModel, TrainConfig,
};

fn main() -> adapter_mixer::Result<()> {
    let data = make_domain(&DomainSpec::new("demo", 0.6, 4))?;
    let backbone = Backbone::init(data.spec.input_dim, 4);

    let fresh = AdapterParams::init(4);
    let head = Head::init(data.spec.num_classes, 4);
    let model = ToyModel::new(&backbone, &fresh, &head);
    let worst = (0..10)
        .map(|i| grad_check(&model, data.test.input(i), data.test.label(i)))
        .collect::<adapter_mixer::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("gradient check: max relative error {worst:.2e}");

    let cfg = TrainConfig { epochs: 60, ..TrainConfig::default() };
    let trained = train_adapter(&backbone, &data, &cfg)?;
    let params = AdapterParams::from_checkpoint(&trained.adapter)?;
    let model = ToyModel::new(&backbone, &params, &trained.head);
    let hardest = (0..data.test.len())
        .max_by(|&a, &b| {
            let la = model.loss(data.test.input(a), data.test.label(a)).unwrap_or(0.0);
            let lb = model.loss(data.test.input(b), data.test.label(b)).unwrap_or(0.0);
            la.total_cmp(&lb)
        })
        .unwrap_or(0);
    let (x, y) = (data.test.input(hardest), data.test.label(hardest));
    let adv = fgsm_perturb(&model, x, y, 0.05)?;
    println!("loss at the hardest test point: {:.4} -> {:.4} under FGSM(0.05)", model.loss(x, y)?, model.loss(&adv, y)?);

    for eps in [0.0, 0.01, 0.05, 0.1] {
        let attack = if eps == 0.0 { Attack::None } else { Attack::Fgsm { epsilon: eps } };
        let acc = evaluate(&backbone, &trained.adapter, &trained.head, &data.test, attack)?;
        println!("eps {eps:<4} accuracy {acc:.4}");
    }
    Ok(())
}
