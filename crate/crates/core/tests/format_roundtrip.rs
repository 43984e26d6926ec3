use liconet::format::{load_model, save_model, to_bytes, Model, ModelFile};
use liconet::linearize::linearize_network;
use liconet::model::{build_lico_net, build_mlp};
use liconet::runtime::random_features;

#[test]
fn disk_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_lico_net(40, 3, 12, 2, 4, 2, 11, 21).unwrap();
    let lnet = linearize_network(&net, 2).unwrap();
    let mlp = build_mlp(21, 40, 40, 320, 11, 4).unwrap();
    for (i, model) in [
        Model::Float(net.into()),
        Model::Linearized(lnet),
        Model::Float(mlp.into()),
    ]
    .into_iter()
    .enumerate()
    {
        let file = ModelFile::with_defaults(model);
        let p = dir.path().join(format!("{i}.lcn"));
        save_model(&file, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.model.kind(), file.model.kind());
        assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&p).unwrap());

        let x = random_features(i as u64, 40, 60);
        let run = |f: &ModelFile| {
            let mut e =
                liconet::runtime::Engine::new(&f.model, liconet::runtime::EngineKind::Linear)
                    .unwrap();
            let t = e.chunk_size();
            (0..x.frames() / t)
                .map(|k| {
                    e.step(&x.slice_frames(k * t, (k + 1) * t).unwrap())
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&file), run(&back));
    }
}
