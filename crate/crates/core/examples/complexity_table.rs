use hgnet::complexity::count_madds;
use hgnet::hourglass::Network;
use hgnet::presets;

fn main() {
    for name in presets::names() {
        let cfg = presets::preset(name).unwrap();
        let (net, store) = Network::with_seed::<f32>(&cfg, 0).unwrap();
        let r = count_madds(&net, &store, net.input_shape(1)).unwrap();
        println!("{name:<26} {:>8.3}M {:>8.3}G", r.total_params as f64 / 1e6, r.total_madds as f64 / 1e9);
    }
}
